"""Training objectives: regional contrastive losses, top-K matching,
localization losses and the teacher→student KL distillation loss.

Defaults not fixed by the method itself: contrastive temperature 0.07,
distillation temperature 1.0, focal alpha 0.25 and gamma 2, unit weights on
all localization terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

DEFAULT_TAU = 0.07
DEFAULT_DISTILL_TAU = 1.0
DEFAULT_TOPK = 3
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_FLOOR = 1e-12


@dataclass
class ContrastiveBatch:
    """Row ``i`` of ``f_v`` and row ``i`` of ``f_l`` form a positive pair."""

    f_v: Tensor
    f_l: Tensor
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.f_v, self.f_l = T.as_tensor(self.f_v), T.as_tensor(self.f_l)
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.f_v.ndim != 2 or self.f_v.shape != self.f_l.shape:
            raise DimensionError(f"paired n×d features required, got {self.f_v.shape} and {self.f_l.shape}")
        if self.f_v.shape[0] < 1:
            raise DimensionError("contrastive batch is empty")
        for name, f in (("f_v", self.f_v), ("f_l", self.f_l)):
            norms = np.linalg.norm(f.data, axis=1)
            if np.abs(norms - 1.0).max() > 1e-8:
                raise ParameterError(f"{name} rows must be L2-normalized")

    @property
    def n(self) -> int:
        return self.f_v.shape[0]


def _diag_nll(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    logp = T.log_softmax(logits, axis=1)
    return T.scalar_mul(T.sum_(T.getitem(logp, (np.arange(n), np.arange(n)))), -1.0 / n)


def similarity_logits(batch: ContrastiveBatch) -> Tensor:
    return T.scalar_mul(T.matmul(batch.f_v, T.transpose(batch.f_l)), 1.0 / batch.tau)


def loss_i2t(batch: ContrastiveBatch) -> Tensor:
    """Region→caption InfoNCE; each denominator runs over all captions."""
    return _diag_nll(similarity_logits(batch))


def loss_t2i(batch: ContrastiveBatch) -> Tensor:
    """Caption→region InfoNCE; each denominator runs over all regions."""
    return _diag_nll(T.transpose(similarity_logits(batch)))


def loss_contrastive(batch: ContrastiveBatch) -> Tensor:
    logits = similarity_logits(batch)
    return _diag_nll(logits) + _diag_nll(T.transpose(logits))


class Match(NamedTuple):
    query: int
    indices: tuple[int, ...]
    similarities: tuple[float, ...]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def topk_match(f_l, f_v, k: int = DEFAULT_TOPK) -> list[Match]:
    """For each text row, the ``k`` most cosine-similar visual rows.

    Results are in descending similarity; equal similarities keep the lower
    visual index first.
    """
    f_l = f_l.data if isinstance(f_l, Tensor) else np.asarray(f_l)
    f_v = f_v.data if isinstance(f_v, Tensor) else np.asarray(f_v)
    if k < 1 or k > f_v.shape[0]:
        raise ParameterError(f"K={k} must lie in [1, {f_v.shape[0]}]")
    sim = cosine_matrix(f_l, f_v)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return [
        Match(i, tuple(int(j) for j in order[i]), tuple(float(sim[i, j]) for j in order[i]))
        for i in range(sim.shape[0])
    ]


def focal_loss(probs, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean of ``-α(1-p_t)^γ log p_t``; ``p_t`` is clamped below at 1e-12."""
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise DimensionError(f"focal_loss expects n×C probs and n targets, got {probs.shape}, {targets.shape}")
    p_t = T.maximum(T.getitem(probs, (np.arange(len(targets)), targets)), PROB_FLOOR)
    weight = T.power(T.sub(1.0, p_t), gamma) if gamma != 0 else Tensor(np.ones(p_t.shape))
    per = T.mul(weight, T.log(p_t))
    return T.scalar_mul(T.mean(per), -alpha)


def _coords(b: Tensor, i: int) -> Tensor:
    return T.getitem(b, (slice(None), i))


def box_losses(pred, target) -> tuple[Tensor, Tensor]:
    """Mean squared-coordinate error and mean ``1 - GIoU`` over ``n×4`` boxes.

    Boxes are ``(x_min, y_min, x_max, y_max)``. A predicted box with zero or
    negative extent has zero area, so its IoU is 0 while the hull stays defined.
    """
    pred = T.as_tensor(pred)
    target_arr = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if pred.ndim == 1:
        pred = T.reshape(pred, (1, 4))
        target_arr = target_arr.reshape(1, 4)
    if pred.shape != target_arr.shape or pred.shape[1] != 4:
        raise DimensionError(f"box shapes differ: {pred.shape} vs {target_arr.shape}")
    if np.any(target_arr[:, 2] <= target_arr[:, 0]) or np.any(target_arr[:, 3] <= target_arr[:, 1]):
        raise ParameterError("target boxes need x_min < x_max and y_min < y_max")
    tgt = Tensor(target_arr)
    diff = T.sub(pred, tgt)
    l2 = T.mean(T.sum_(T.mul(diff, diff), axis=1))

    px0, py0, px1, py1 = (_coords(pred, i) for i in range(4))
    tx0, ty0, tx1, ty1 = (_coords(tgt, i) for i in range(4))
    pw = T.maximum(T.sub(px1, px0), 0.0)
    ph = T.maximum(T.sub(py1, py0), 0.0)
    area_p = T.mul(pw, ph)
    area_t = T.mul(T.sub(tx1, tx0), T.sub(ty1, ty0))
    iw = T.maximum(T.sub(T.minimum(px1, tx1), T.maximum(px0, tx0)), 0.0)
    ih = T.maximum(T.sub(T.minimum(py1, ty1), T.maximum(py0, ty0)), 0.0)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(area_p, area_t), inter)
    hull_w = T.sub(T.maximum(px1, tx1), T.minimum(px0, tx0))
    hull_h = T.sub(T.maximum(py1, ty1), T.minimum(py0, ty0))
    hull = T.mul(hull_w, hull_h)
    giou = T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))
    return l2, T.mean(T.sub(1.0, giou))


@dataclass
class DetectionInputs:
    class_probs: Tensor  # n x C
    target_classes: np.ndarray  # n
    pred_boxes: Tensor  # n x 4
    target_boxes: np.ndarray  # n x 4
    alpha: float = FOCAL_ALPHA
    gamma: float = FOCAL_GAMMA


class PretrainTerms(NamedTuple):
    total: Tensor
    contrastive: Tensor
    focal: Tensor
    l2: Tensor
    giou: Tensor


def pretrain_terms(batch: ContrastiveBatch, det: DetectionInputs) -> PretrainTerms:
    ctra = loss_contrastive(batch)
    focal = focal_loss(det.class_probs, det.target_classes, det.alpha, det.gamma)
    l2, giou = box_losses(det.pred_boxes, det.target_boxes)
    total = T.add(T.add(T.add(ctra, focal), l2), giou)
    return PretrainTerms(total, ctra, focal, l2, giou)


def loss_pretrain(batch: ContrastiveBatch, det: DetectionInputs) -> Tensor:
    """Contrastive loss plus focal, L2 and GIoU localization terms."""
    return pretrain_terms(batch, det).total


@dataclass
class LogitPair:
    teacher: np.ndarray  # n x C, treated as constant
    student: Tensor  # n x C

    def __post_init__(self):
        self.teacher = np.asarray(self.teacher.data if isinstance(self.teacher, Tensor) else self.teacher, dtype=float)
        self.student = T.as_tensor(self.student)
        if self.teacher.shape != self.student.shape or self.teacher.ndim != 2:
            raise DimensionError(f"logit shapes differ: {self.teacher.shape} vs {self.student.shape}")
        if not (np.all(np.isfinite(self.teacher)) and np.all(np.isfinite(self.student.data))):
            raise ParameterError("logits must be finite")


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    # same arithmetic as tensor.log_softmax so identical logits give exactly 0
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_distill(pair: LogitPair, tau: float = DEFAULT_DISTILL_TAU) -> Tensor:
    """Mean over rows of KL(softmax(teacher/τ) ‖ softmax(student/τ)).

    The teacher side is a constant; no gradient reaches it.
    """
    if tau <= 0:
        raise ParameterError(f"distillation temperature must be positive, got {tau}")
    logp = _log_softmax_np(pair.teacher * (1.0 / tau))
    p = np.exp(logp)
    n = p.shape[0]
    logq = T.log_softmax(T.scalar_mul(pair.student, 1.0 / tau), axis=1)
    cross = T.sum_(T.mul(Tensor(p), logq))
    return T.scalar_mul(T.sub(float((p * logp).sum()), cross), 1.0 / n)


def cross_entropy(logits, targets) -> Tensor:
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    logp = T.log_softmax(logits, axis=1)
    return T.scalar_mul(T.mean(T.getitem(logp, (np.arange(len(targets)), targets))), -1.0)


def kl_divergence_np(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0) -> float:
    """Mean row KL in plain numpy, for evaluation."""
    logp = _log_softmax_np(np.asarray(teacher_logits, dtype=float) * (1.0 / tau))
    logq = _log_softmax_np(np.asarray(student_logits, dtype=float) * (1.0 / tau))
    return float((np.exp(logp) * (logp - logq)).sum() / logp.shape[0])
