"""Task runners behind the CLI subcommands.

Each runner writes into ``out``: ``metrics.jsonl`` (deterministic records),
``timings.jsonl`` (wall-clock measurements), ``summary.json`` and whatever
checkpoints or text artifacts the task produces.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .. import tensor as T
from ..errors import CheckpointError, ConfigError, DimensionError, NumericError
from ..freespace import CameraModel, format_polygon, mask_to_freespace
from ..gradsweep import CASES, run_sweep
from ..graph import ModelGraph, graph_from_state, toy_cnn
from ..objectives import ContrastiveBatch, DetectionInputs, kl_divergence_np, pretrain_terms, topk_match
from ..optim import Adam
from ..synthworld import (
    CAPTION_LEN,
    N_REGION_CLASSES,
    VOCAB,
    ClassificationSet,
    Sample,
    gen_classification_set,
    gen_scene,
)
from ..tensor import Tensor
from ..train import accuracy, fit_classifier, predict_logits
from ..trimmer import TrimConfig, count_flops, trim_loop
from ..vl_blocks import VLConfig, VLModel
from . import checkpoint as ckpt_io
from .config import RunConfig, parse_config
from .metrics import MetricsWriter
from .pnm import read_mask, write_pnm

log = logging.getLogger(__name__)

STREAMS = ("data", "init", "sampling", "eval", "teacher", "compare")
EVAL_SEED_BASE = 1 << 30  # held-out scene seeds never collide with training seeds
CLS_INPUT = (3, 16, 16)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """One generator per purpose, all split from a single root seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


@dataclass
class RunResult:
    task: str
    status: str
    out: Path
    summary: dict[str, Any] = field(default_factory=dict)


class _Run:
    def __init__(self, task: str, cfg: RunConfig, out: Optional[str | Path]):
        self.task = task
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.run.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rngs = rng_streams(cfg.seed)
        self.metrics = MetricsWriter(self.out / "metrics.jsonl")
        self.timings = MetricsWriter(self.out / "timings.jsonl")
        self.metrics.emit("config", 0, task=task, seed=cfg.seed, preset=cfg.run.preset)

    def save(self, name: str, tensors: dict[str, np.ndarray]) -> Path:
        path = self.out / name
        snapshot = self.cfg.to_text(include_out=False)
        ckpt_io.save(path, ckpt_io.Checkpoint(tensors, snapshot, self.cfg.seed))
        return path

    def finish(self, status: str, **summary: Any) -> RunResult:
        summary = {"task": self.task, "status": status, **summary}
        self.metrics.emit("summary", 0, **summary)
        (self.out / "summary.json").write_text(json.dumps(self.metrics.records[-1], indent=2, sort_keys=True) + "\n")
        return RunResult(self.task, status, self.out, summary)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


def vl_config(cfg: RunConfig) -> VLConfig:
    m = cfg.model
    return VLConfig(
        image_size=m.image_size,
        conv_widths=tuple(m.conv_widths),
        d_text=m.d_text,
        n_hat=m.n_hat,
        embed_dim=m.embed_dim,
        depth=m.depth,
        vocab_size=len(VOCAB),
        caption_len=CAPTION_LEN,
        n_region_classes=N_REGION_CLASSES,
        det_hidden=m.det_hidden,
        max_regions=m.max_regions,
    )


def _scenes(cfg: RunConfig, seeds) -> list[Sample]:
    n = min(cfg.data.n_regions, cfg.model.max_regions)
    return [gen_scene(int(s), n, cfg.model.image_size, cfg.data.noise) for s in seeds]


def _forward(model: VLModel, scenes: list[Sample]):
    return model.forward(
        np.stack([s.image for s in scenes]), [s.proposals for s in scenes], [s.captions for s in scenes]
    )


def retrieval_eval(model: VLModel, scenes: list[Sample], group: int, k: int = 3) -> dict[str, float]:
    """Region↔caption retrieval within groups of ``group`` scenes.

    A caption's positive is the region it was generated for; every other
    region of the group is a distractor, and vice versa.
    """
    hits = {"r1_t2v": [], "r1_v2t": [], "rk_t2v": [], "rk_v2t": []}
    pool_sizes = []
    with T.no_grad():
        for lo in range(0, len(scenes), group):
            out = _forward(model, scenes[lo:lo + group])
            f_v, f_l = out.f_v.data, out.f_l.data
            n = len(f_v)
            pool_sizes.append(n)
            kk = min(k, n)
            for key, matches in (("t2v", topk_match(f_l, f_v, kk)), ("v2t", topk_match(f_v, f_l, kk))):
                for m in matches:
                    hits[f"r1_{key}"].append(m.indices[0] == m.query)
                    hits[f"rk_{key}"].append(m.query in m.indices)
    res = {name: float(np.mean(v)) for name, v in hits.items()}
    res["r1"] = 0.5 * (res["r1_t2v"] + res["r1_v2t"])
    res["chance"] = float(np.mean([1.0 / n for n in pool_sizes]))
    return res


def _numeric_abort(run: _Run, model, step: int, what: str) -> None:
    run.save("diagnostic.vltc", model.state_dict())
    run.metrics.emit("abort", step, reason=what)
    raise NumericError(f"{what} at step {step}; parameters saved to {run.out / 'diagnostic.vltc'}")


def run_pretrain(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("pretrain", cfg, out)
    model = VLModel(vl_config(cfg), run.rngs["init"])
    opt = Adam(model.parameters(), lr=cfg.optim.lr)
    eval_seeds = EVAL_SEED_BASE + run.rngs["eval"].integers(0, EVAL_SEED_BASE, size=cfg.data.eval_scenes)
    held_out = _scenes(cfg, eval_seeds)
    size = cfg.model.image_size
    last: dict[str, float] = {}
    t0 = time.perf_counter()
    for step in range(1, cfg.optim.max_iters + 1):
        scenes = _scenes(cfg, run.rngs["data"].integers(0, EVAL_SEED_BASE, size=cfg.optim.batch_size))
        out_ = _forward(model, scenes)
        batch = ContrastiveBatch(out_.f_v, out_.f_l, cfg.loss.tau)
        det = DetectionInputs(
            out_.class_probs,
            np.concatenate([s.classes for s in scenes]),
            out_.pred_boxes,
            np.concatenate([s.boxes for s in scenes]) / size,
        )
        terms = pretrain_terms(batch, det)
        if not all(np.isfinite(t.data) for t in terms):
            _numeric_abort(run, model, step, "non-finite pretraining loss")
        opt.zero_grad()
        terms.total.backward()
        opt.step()
        last = {name: float(getattr(terms, name).data) for name in terms._fields}
        if step % cfg.optim.eval_interval == 0 or step == cfg.optim.max_iters:
            rec = retrieval_eval(model, held_out, cfg.data.eval_group, cfg.loss.topk)
            run.metrics.emit("train", step, **{f"loss_{k}": v for k, v in last.items()})
            run.metrics.emit("eval", step, **rec)
            run.timings.emit("elapsed", step, seconds=time.perf_counter() - t0)
            log.info("step %d loss %.4f R@1 %.3f", step, last["total"], rec["r1"])
    path = run.save("model.vltc", model.state_dict())
    final = retrieval_eval(model, held_out, cfg.data.eval_group, cfg.loss.topk)
    return run.finish("ok", checkpoint=path.name, steps=cfg.optim.max_iters, **final)


# --------------------------------------------------------------------------
# classifiers: distillation and trimming
# --------------------------------------------------------------------------


def _cls_data(run: _Run, n_classes: int, sizes: dict[str, int]) -> dict[str, ClassificationSet]:
    seeds = run.rngs["data"].integers(0, 2**31, size=len(sizes))
    return {
        name: gen_classification_set(int(s), n_classes, n, CLS_INPUT[1], run.cfg.data.noise)
        for (name, n), s in zip(sizes.items(), seeds)
    }


def load_classifier(path: str | Path) -> ModelGraph:
    state = ckpt_io.load(path).tensors
    if "fc.weight" not in state or not any(k.startswith("conv") for k in state):
        raise CheckpointError(f"{path} does not hold a conv classifier")
    convs = [k for k in state if k.startswith("conv") and k.endswith(".weight")]
    last = max(convs, key=lambda k: int(k[4:].split(".")[0]))
    pool = "gap" if state["fc.weight"].shape[1] == state[last].shape[0] else "flatten"
    try:
        return graph_from_state(state, CLS_INPUT, pool)
    except (DimensionError, KeyError) as exc:
        raise CheckpointError(f"{path}: inconsistent classifier tensors ({exc})") from None


def _train_labels(run: _Run, model: ModelGraph, data, epochs: int, rng, tag: str, val=None, batch_size=32):
    def on_epoch(epoch, train_loss, ev):
        run.metrics.emit(f"{tag}_epoch", epoch + 1, train_loss=train_loss, eval_loss=ev)

    fit_classifier(model, data, epochs, rng, lr=run.cfg.optim.lr, batch_size=batch_size, val=val, on_epoch=on_epoch)
    return model


def run_distill(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("distill", cfg, out)
    d = cfg.distill
    run.metrics.emit("metadata", 0, prompt_label=d.prompt_label)
    data = _cls_data(run, d.n_classes, {"pool": d.n_teacher, "val": d.n_val})
    train = data["pool"].subset(np.arange(min(d.n_train, d.n_teacher)))
    val = data["val"]
    if d.teacher:
        teacher = load_classifier(d.teacher)
    else:
        teacher = toy_cnn(run.rngs["teacher"], d.teacher_widths, d.n_classes, CLS_INPUT, pool=d.teacher_pool)
        _train_labels(run, teacher, data["pool"], d.teacher_epochs, run.rngs["teacher"], "teacher", val, d.batch_size)
        run.save("teacher.vltc", teacher.state_dict())
    n_out = teacher.shapes()[-1]
    if n_out != (d.n_classes,):
        raise ConfigError(f"teacher emits {n_out[0]} logits but distill.n_classes = {d.n_classes}")

    def student(rng):
        return toy_cnn(rng, d.student_widths, d.n_classes, CLS_INPUT, pool=d.student_pool)

    probe = student(np.random.default_rng(0))
    if probe.num_params() >= teacher.num_params():
        raise ConfigError(
            f"student has {probe.num_params()} parameters, teacher {teacher.num_params()}; student must be smaller"
        )
    teacher_val = predict_logits(teacher, val.images)
    fit_kw = dict(lr=cfg.optim.lr, batch_size=d.batch_size, tau=d.tau, task_weight=d.task_weight)

    stu = student(run.rngs["init"])
    kl0 = kl_divergence_np(teacher_val, predict_logits(stu, val.images))
    run.metrics.emit("distill_start", 0, val_kl=kl0, student_params=stu.num_params(), teacher_params=teacher.num_params())

    def on_epoch(epoch, train_loss, ev):
        run.metrics.emit(
            "distill_epoch", epoch + 1, train_loss=train_loss, val_kl=kl_divergence_np(teacher_val, predict_logits(stu, val.images))
        )

    fit_classifier(stu, train, d.epochs, run.rngs["sampling"], teacher=teacher, on_epoch=on_epoch, **fit_kw)
    kl1 = kl_divergence_np(teacher_val, predict_logits(stu, val.images))
    path = run.save("student.vltc", stu.state_dict())

    pairs = []
    for i in range(d.compare_seeds):
        init_seed, order_seed = (int(s) for s in run.rngs["compare"].integers(0, 2**31, size=2))
        distilled = student(np.random.default_rng(init_seed))
        label_only = distilled.copy()
        fit_classifier(distilled, train, d.epochs, np.random.default_rng(order_seed), teacher=teacher, **fit_kw)
        fit_classifier(label_only, train, d.epochs, np.random.default_rng(order_seed), lr=cfg.optim.lr, batch_size=d.batch_size)
        pair = (accuracy(distilled, val), accuracy(label_only, val))
        pairs.append(pair)
        run.metrics.emit("compare", i + 1, distilled_acc=pair[0], label_only_acc=pair[1])
    summary = dict(
        checkpoint=path.name,
        prompt_label=d.prompt_label,
        teacher_acc=accuracy(teacher, val),
        student_acc=accuracy(stu, val),
        val_kl_initial=kl0,
        val_kl_final=kl1,
        kl_ratio=kl1 / kl0 if kl0 > 0 else 0.0,
        student_params=stu.num_params(),
        teacher_params=teacher.num_params(),
    )
    if pairs:
        arr = np.array(pairs)
        summary.update(
            distilled_acc_mean=float(arr[:, 0].mean()),
            label_only_acc_mean=float(arr[:, 1].mean()),
            distilled_wins=int(np.sum(arr[:, 0] > arr[:, 1])),
            ties=int(np.sum(arr[:, 0] == arr[:, 1])),
        )
    return run.finish("ok", **summary)


def forward_time(model: ModelGraph, batch: np.ndarray, repeats: int) -> float:
    """Best-of-``repeats`` wall-clock seconds for one no-grad forward pass."""
    best = float("inf")
    x = Tensor(batch)
    with T.no_grad():
        model.forward(x)  # warm caches
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(x)
            best = min(best, time.perf_counter() - t0)
    return best


def run_trim(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("trim", cfg, out)
    t = cfg.trim
    data = _cls_data(run, t.n_classes, {"train": t.n_train, "val": t.n_val})
    train, val = data["train"], data["val"]
    if t.model:
        model = load_classifier(t.model)
    else:
        model = toy_cnn(run.rngs["init"], t.widths, t.n_classes, CLS_INPUT)
        _train_labels(run, model, train, t.baseline_epochs, run.rngs["init"], "baseline", val, t.batch_size)
        run.save("baseline.vltc", model.state_dict())
    teacher = load_classifier(t.teacher) if t.teacher else model.copy()
    if teacher.shapes()[-1] != model.shapes()[-1]:
        raise ConfigError("teacher and model emit different numbers of logits")
    base_acc = accuracy(model, val)
    base_flops = count_flops(model)
    run.metrics.emit("baseline", 0, val_accuracy=base_acc, flops=base_flops.total, params=model.num_params())
    tcfg = TrimConfig(
        target_rate=t.target_rate,
        removals_per_layer=t.removals_per_layer,
        warmup_steps=cfg.trim_warmup_steps(),
        epochs_per_iter=t.epochs_per_iter,
        sample_fraction=t.sample_fraction,
        final_epochs=t.final_epochs,
        plateau_tol=t.plateau_tol,
        plateau_epochs=t.plateau_epochs,
        lr=cfg.optim.lr,
        batch_size=t.batch_size,
        tau=t.tau,
        task_weight=t.task_weight,
    )

    def on_iteration(rec):
        run.metrics.emit(
            "trim_iteration",
            rec.iteration,
            flops=rec.flops,
            ratio=rec.ratio,
            params=rec.params,
            widths=rec.widths,
            structural_gap=rec.structural_gap,
            val_accuracy=rec.val_accuracy,
            val_kl=rec.val_kl,
            epochs_run=rec.epochs_run,
        )

    result = trim_loop(model, teacher, train, val, tcfg, run.rngs["sampling"], on_iteration)
    pruned = result.model
    final_acc = accuracy(pruned, val)
    path = run.save("pruned.vltc", pruned.state_dict())
    batch = run.rngs["eval"].random((t.timing_batch,) + CLS_INPUT)
    t_before = forward_time(model, batch, t.timing_repeats)
    t_after = forward_time(pruned, batch, t.timing_repeats)
    timing = dict(forward_before_s=t_before, forward_after_s=t_after, speedup=t_before / t_after)
    run.timings.emit("forward_time", 0, batch=t.timing_batch, **timing)
    report = count_flops(pruned, baseline=base_flops.total)
    summary = dict(
        checkpoint=path.name,
        iterations=len(result.history),
        baseline_flops=base_flops.total,
        final_flops=report.total,
        final_ratio=report.ratio,
        flops_per_layer=report.per_layer,
        baseline_accuracy=base_acc,
        final_accuracy=final_acc,
        relative_accuracy_drop=(base_acc - final_acc) / base_acc if base_acc > 0 else 0.0,
        widths={n: pruned.layer(n).out_channels for n in pruned.prunable_layers()},
        flops_convention="2 FLOPs per multiply-accumulate",
    )
    res = run.finish(result.status, **summary)
    # timings stay out of the deterministic metrics stream
    (run.out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    res.summary.update(timing)
    return res


# --------------------------------------------------------------------------
# evaluation, free space, gradient check
# --------------------------------------------------------------------------


def run_eval(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("eval", cfg, out)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval.checkpoint is required")
    ck = ckpt_io.load(cfg.eval.checkpoint)
    if "fc.weight" in ck.tensors:
        model = load_classifier(cfg.eval.checkpoint)
        n_classes = model.shapes()[-1][0]
        val = _cls_data(run, n_classes, {"val": cfg.trim.n_val})["val"]
        return run.finish("ok", kind="classifier", val_accuracy=accuracy(model, val), params=model.num_params())
    saved = parse_config(ck.config) if ck.config else cfg
    model = VLModel(vl_config(saved), np.random.default_rng(0))
    try:
        model.load_state(ck.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match the model configuration: {exc}") from None
    seeds = EVAL_SEED_BASE + run.rngs["eval"].integers(0, EVAL_SEED_BASE, size=cfg.data.eval_scenes)
    rec = retrieval_eval(model, _scenes(saved, seeds), cfg.data.eval_group, cfg.loss.topk)
    return run.finish("ok", kind="retrieval", **rec)


def synthetic_road_mask(height: int = 96, width: int = 128) -> np.ndarray:
    """Trapezoidal road widening towards the bottom of the image."""
    rows, cols = np.mgrid[0:height, 0:width]
    top = height // 3
    half = 6 + (rows - top) * 0.9
    return (rows >= top) & (np.abs(cols - (width - 1) / 2) <= half)


def run_freespace(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("freespace", cfg, out)
    f = cfg.freespace
    if f.mask:
        mask = read_mask(f.mask)
    else:
        mask = synthetic_road_mask()
        write_pnm(run.out / "mask.pgm", mask)
    cam = CameraModel.from_pose(f.fx, f.fy, f.cx, f.cy, f.height, f.pitch, f.yaw, f.roll)
    region = mask_to_freespace(mask, cam, f.d_safe, f.tolerance)
    (run.out / "free_polygon.txt").write_text(format_polygon(region.polygon))
    (run.out / "safe_polygon.txt").write_text(format_polygon(region.safe) if not region.safe.is_empty else "")
    return run.finish(
        region.status,
        free_area_m2=float(region.polygon.area),
        safe_area_m2=region.safe_area,
        d_safe=f.d_safe,
        mask_pixels=int(mask.sum()),
    )


def run_gradcheck(cfg: RunConfig, out=None) -> RunResult:
    run = _Run("gradcheck", cfg, out)
    g = cfg.gradcheck
    if g.corrupt and g.corrupt not in CASES:
        raise ConfigError(f"gradcheck.corrupt names unknown op {g.corrupt!r}")
    report = run_sweep(run.rngs["sampling"], g.instances, g.eps, g.threshold, corrupt=g.corrupt)
    for name, err in report.max_rel_err.items():
        run.metrics.emit("gradcheck", 0, op=name, max_rel_err=err, instances=report.instances[name], passed=err < g.threshold)
    (run.out / "gradcheck.txt").write_text("\n".join(report.lines()) + "\n")
    return run.finish("pass" if report.passed else "fail", failures=report.failures, ops=len(report.max_rel_err))


RUNNERS = {
    "pretrain": run_pretrain,
    "distill": run_distill,
    "trim": run_trim,
    "eval": run_eval,
    "freespace": run_freespace,
    "gradcheck": run_gradcheck,
}
