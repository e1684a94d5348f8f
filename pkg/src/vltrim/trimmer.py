"""Structural filter trimming.

Filters are scored by magnitude (l1 and l2 norms, scaled per layer by the
layer maximum) plus redundancy (Euclidean distance and cosine distance to the
filter's nearest neighbour). Low scores mark small, replaceable filters. The
prune–distill loop removes the lowest-scoring filters of every prunable layer,
rewrites the graph structurally, fine-tunes the result against a frozen
teacher and repeats until the FLOPs target is met.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .graph import ModelGraph
from .synthworld import ClassificationSet
from .tensor import Tensor
from .train import accuracy, fit_classifier, predict_logits
from .objectives import kl_divergence_np

log = logging.getLogger(__name__)

# full-scale schedule the desk defaults are scaled from
FULL_T_START = 100_000
FULL_MAX_ITERS = 300_000


@dataclass
class FilterView:
    layer: str
    index: int
    weights: np.ndarray  # flattened, length M_h


@dataclass
class FilterScore:
    """Importance record of one filter; ``b`` is its nearest neighbour."""

    layer: str
    index: int
    partner: int
    l1_a: float
    l1_b: float
    l2_a: float
    l2_b: float
    euc: float
    cos: float
    total: float

    @property
    def components(self) -> tuple[float, ...]:
        return (self.l1_a, self.l1_b, self.l2_a, self.l2_b, self.euc, self.cos)


@dataclass
class TrimConfig:
    target_rate: float = 0.5
    removals_per_layer: int = 3
    warmup_steps: int = round(FULL_T_START * 2000 / FULL_MAX_ITERS)
    epochs_per_iter: int = 5
    sample_fraction: float = 0.25
    final_epochs: int = 5
    plateau_tol: float = 1e-4
    plateau_epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 32
    tau: float = 1.0
    task_weight: float = 0.0
    exactness_inputs: int = 128
    exactness_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.target_rate < 1.0:
            raise ParameterError(f"target FLOPs decreasing rate must lie in (0, 1), got {self.target_rate}")
        if self.removals_per_layer < 1:
            raise ParameterError("removals_per_layer must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ParameterError("sample_fraction must lie in (0, 1]")


def _vec(f: Union[FilterView, np.ndarray, Sequence[float]]) -> np.ndarray:
    v = f.weights if isinstance(f, FilterView) else f
    return np.asarray(v, dtype=float).reshape(-1)


def filter_norm(f, z: int) -> float:
    """(Σ|c_i|^z)^(1/z) for z in {1, 2}."""
    v = _vec(f)
    if v.size == 0:
        raise ContractError("filter has no weights")
    if z == 1:
        return float(np.sum(np.abs(v)))
    if z == 2:
        return float(np.sqrt(np.sum(v * v)))
    raise ParameterError(f"norm order must be 1 or 2, got {z}")


def filter_euclidean(a, b) -> float:
    va, vb = _vec(a), _vec(b)
    if va.size != vb.size:
        raise DimensionError(f"filters have {va.size} and {vb.size} weights")
    d = va - vb
    return float(np.sqrt(np.sum(d * d)))


def filter_cosine(a, b) -> float:
    """1 - cos(a, b); defined as 1 when either filter is all zeros."""
    va, vb = _vec(a), _vec(b)
    if va.size != vb.size:
        raise DimensionError(f"filters have {va.size} and {vb.size} weights")
    na, nb = np.sqrt(np.sum(va * va)), np.sqrt(np.sum(vb * vb))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - np.sum(va * vb) / (na * nb))


def filter_views(model: ModelGraph, layer: str) -> list[FilterView]:
    w = model.layer(layer).weight.data
    flat = w.reshape(w.shape[0], -1)
    return [FilterView(layer, i, flat[i].copy()) for i in range(w.shape[0])]


def nearest_partners(weights: np.ndarray) -> np.ndarray:
    """Index of the filter minimizing euclidean + cosine distance to each row."""
    w = np.asarray(weights, dtype=float)
    sq = np.sum(w * w, axis=1)
    gram = w @ w.T
    euc = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0))
    norms = np.sqrt(sq)
    denom = norms[:, None] * norms[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, 1.0 - gram / np.where(denom > 0, denom, 1.0), 1.0)
    dist = euc + cos
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def score_layer(filters: Sequence[FilterView]) -> list[FilterScore]:
    """Score every filter of one layer; a single-filter layer is skipped."""
    if len(filters) < 2:
        warnings.warn(f"layer {filters[0].layer if filters else '?'} has fewer than 2 filters; skipped")
        return []
    layer = filters[0].layer
    w = np.stack([_vec(f) for f in filters])
    if len({f.size for f in w}) != 1:
        raise DimensionError("filters of one layer must have equal length")
    l1 = np.array([filter_norm(f, 1) for f in filters])
    l2 = np.array([filter_norm(f, 2) for f in filters])
    l1 = l1 / l1.max() if l1.max() > 0 else l1
    l2 = l2 / l2.max() if l2.max() > 0 else l2
    partners = nearest_partners(w)
    scores = []
    for a, f in enumerate(filters):
        b = int(partners[a])
        euc = filter_euclidean(f, filters[b])
        cos = max(filter_cosine(f, filters[b]), 0.0)
        comps = (float(l1[a]), float(l1[b]), float(l2[a]), float(l2[b]), euc, cos)
        total = comps[0] + comps[1] + comps[2] + comps[3] + comps[4] + comps[5]
        scores.append(FilterScore(layer, f.index, b, *comps, total))
    return scores


def rank_filters(scores: Sequence[FilterScore]) -> list[FilterScore]:
    """Ascending total; equal totals keep the lower filter index first."""
    return sorted(scores, key=lambda s: (s.total, s.index))


def select_removals(scores: Sequence[FilterScore], k: int = 3) -> list[int]:
    """Lowest-scoring filters, at most ``k``, never emptying the layer.

    When two filters are each other's nearest neighbour and one is already
    selected, the other is passed over, so one member of every redundant pair
    survives the round.
    """
    n = len(scores)
    partner = {s.index: s.partner for s in scores}
    chosen: list[int] = []
    for s in rank_filters(scores):
        if len(chosen) >= k or n - len(chosen) <= 1:
            break
        if s.partner in chosen and partner.get(s.partner) == s.index:
            continue
        chosen.append(s.index)
    return sorted(chosen)


def _successor_columns(model: ModelGraph, layer: str, channels: np.ndarray) -> np.ndarray:
    span = model.channel_span(layer)
    return (np.asarray(channels)[:, None] * span + np.arange(span)[None, :]).reshape(-1)


def _check_removal(model: ModelGraph, layer: str, indices) -> np.ndarray:
    if layer not in model.prunable_layers():
        raise ContractError(f"layer {layer!r} is not prunable")
    n = model.layer(layer).out_channels
    idx = np.unique(np.asarray(indices, dtype=int))
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"filter indices out of range for {n} filters")
    if idx.size >= n:
        raise ContractError(f"cannot remove all {n} filters of {layer!r}")
    return idx


def remove_filters(model: ModelGraph, layer: str, indices) -> ModelGraph:
    """Drop output channels of ``layer`` and the matching successor inputs."""
    idx = _check_removal(model, layer, indices)
    new = model.copy()
    target = new.layer(layer)
    keep = np.setdiff1d(np.arange(target.out_channels), idx)
    succ_name = model.successor(layer)
    cols = _successor_columns(model, layer, keep)
    target.weight = Tensor(target.weight.data[keep], requires_grad=True)
    if target.bias is not None:
        target.bias = Tensor(target.bias.data[keep], requires_grad=True)
    succ = new.layer(succ_name)
    succ.weight = Tensor(np.ascontiguousarray(succ.weight.data[:, cols]), requires_grad=True)
    new.shapes()
    return new


def zero_mask(model: ModelGraph, removals: dict[str, Sequence[int]]) -> ModelGraph:
    """Copy of ``model`` with the given filters and their successor inputs zeroed."""
    new = model.copy()
    for layer, indices in removals.items():
        idx = _check_removal(model, layer, indices)
        target = new.layer(layer)
        target.weight.data[idx] = 0.0
        if target.bias is not None:
            target.bias.data[idx] = 0.0
        succ = new.layer(model.successor(layer))
        succ.weight.data[:, _successor_columns(model, layer, idx)] = 0.0
    return new


@dataclass
class FlopsReport:
    """FLOPs per sample; one multiply-accumulate counts as 2 FLOPs."""

    per_layer: dict[str, int]
    total: int
    baseline: int
    ratio: float


def layer_flops(model: ModelGraph, input_shape: Optional[tuple[int, ...]] = None) -> dict[str, int]:
    if input_shape is not None and tuple(input_shape) != model.input_shape:
        model = ModelGraph(model.layers, tuple(input_shape))
    shapes = model.shapes()
    out = {}
    for i, (name, layer) in enumerate(model.layers):
        if layer.kind == "conv":
            c_out, c_in, kh, kw = layer.weight.shape
            _, h, w = shapes[i + 1]
            out[name] = 2 * c_out * c_in * kh * kw * h * w
        elif layer.kind == "linear":
            out[name] = 2 * layer.in_channels * layer.out_channels
    return out


def count_flops(model: ModelGraph, input_shape=None, baseline: Optional[int] = None) -> FlopsReport:
    per = layer_flops(model, input_shape)
    total = sum(per.values())
    base = baseline if baseline is not None else (model.baseline_flops or total)
    return FlopsReport(per, total, base, total / base)


def structural_gap(before: ModelGraph, after: ModelGraph, removals: dict[str, Sequence[int]], inputs: np.ndarray) -> float:
    """Max |pruned - zero-masked| output over ``inputs``."""
    masked = zero_mask(before, removals)
    return float(np.max(np.abs(predict_logits(after, inputs) - predict_logits(masked, inputs))))


def prune_step(model: ModelGraph, k: int) -> tuple[ModelGraph, dict[str, list[int]]]:
    """Score and trim every prunable layer once, front to back."""
    current = model
    removals: dict[str, list[int]] = {}
    for layer in model.prunable_layers():
        scores = score_layer(filter_views(current, layer))
        if not scores:
            continue
        idx = select_removals(scores, k)
        if idx:
            current = remove_filters(current, layer, idx)
            removals[layer] = idx
    return current, removals


@dataclass
class IterationRecord:
    iteration: int
    flops: int
    ratio: float
    params: int
    widths: dict[str, int]
    removed: dict[str, list[int]]
    structural_gap: float
    val_accuracy: float
    val_kl: float
    epochs_run: int


@dataclass
class TrimResult:
    model: ModelGraph
    history: list[IterationRecord] = field(default_factory=list)
    status: str = "reached"
    baseline_flops: int = 0
    final_ratio: float = 1.0


def max_iterations(model: ModelGraph, k: int) -> int:
    layers = model.prunable_layers()
    widest = max((model.layer(n).out_channels for n in layers), default=0)
    return math.ceil(widest / k) * len(layers)


def trim_loop(
    model: ModelGraph,
    teacher: ModelGraph,
    train: ClassificationSet,
    val: ClassificationSet,
    cfg: TrimConfig,
    rng: np.random.Generator,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> TrimResult:
    """Prune-and-distill until the FLOPs ratio drops to ``1 - target_rate``."""
    model = model.copy()
    baseline = count_flops(model).total
    model.baseline_flops = baseline
    fit_kw = dict(lr=cfg.lr, batch_size=cfg.batch_size, teacher=teacher, tau=cfg.tau, task_weight=cfg.task_weight)
    if cfg.warmup_steps > 0:
        fit_classifier(model, train, epochs=10**6, rng=rng, max_steps=cfg.warmup_steps, **fit_kw)
    teacher_val = predict_logits(teacher, val.images)
    result = TrimResult(model, baseline_flops=baseline)
    ratio = 1.0
    limit = max_iterations(model, cfg.removals_per_layer)
    iteration = 0
    while ratio > 1.0 - cfg.target_rate:
        if iteration >= limit:
            result.status = "unreached"
            break
        pruned, removals = prune_step(model, cfg.removals_per_layer)
        if not removals:
            log.warning("every prunable layer is at its floor; target ratio %.3f unreachable", 1 - cfg.target_rate)
            result.status = "unreached"
            break
        probe = rng.standard_normal((cfg.exactness_inputs,) + model.input_shape)
        gap = structural_gap(model, pruned, removals, probe)
        if gap > cfg.exactness_tol:
            raise ContractError(f"structural removal deviates from zero-masking by {gap:.3e}")
        n_sub = max(1, int(round(cfg.sample_fraction * len(train))))
        subset = train.subset(np.sort(rng.choice(len(train), size=n_sub, replace=False)))
        fit = fit_classifier(
            pruned,
            subset,
            epochs=cfg.epochs_per_iter,
            rng=rng,
            val=val,
            plateau_tol=cfg.plateau_tol,
            plateau_epochs=cfg.plateau_epochs,
            **fit_kw,
        )
        model = pruned
        model.baseline_flops = baseline
        report = count_flops(model, baseline=baseline)
        ratio = report.ratio
        iteration += 1
        rec = IterationRecord(
            iteration,
            report.total,
            ratio,
            model.num_params(),
            {n: model.layer(n).out_channels for n in model.prunable_layers()},
            removals,
            gap,
            accuracy(model, val),
            kl_divergence_np(teacher_val, predict_logits(model, val.images), cfg.tau),
            fit.epochs_run,
        )
        result.history.append(rec)
        log.info("trim iteration %d: ratio %.3f, val acc %.3f", iteration, ratio, rec.val_accuracy)
        if on_iteration is not None:
            on_iteration(rec)
    if cfg.final_epochs > 0 and result.history:
        fit_classifier(model, train, epochs=cfg.final_epochs, rng=rng, val=val, **fit_kw)
    result.model = model
    result.final_ratio = ratio
    return result
