"""Run configuration: ``section.key = value`` text files with presets.

Every accepted key is declared below with its type and valid range; anything
else is rejected. A ``run.preset`` line selects a preset whose values are
applied first, then the remaining lines override them.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..errors import ConfigError

TASKS = ("pretrain", "distill", "trim", "eval", "freespace", "gradcheck")


def _rng(lo=None, hi=None, lo_open=False, hi_open=False):
    return {"lo": lo, "hi": hi, "lo_open": lo_open, "hi_open": hi_open}


@dataclass
class RunSection:
    preset: str = field(default="desk", metadata={"choices": ("desk", "paper-scale")})
    task: str = field(default="", metadata={"choices": ("",) + TASKS})
    seed: int = field(default=0, metadata=_rng(0))
    out: str = "runs/out"


@dataclass
class OptimSection:
    lr: float = field(default=1e-3, metadata=_rng(0, 1, lo_open=True))
    batch_size: int = field(default=16, metadata=_rng(1))
    max_iters: int = field(default=2000, metadata=_rng(0))
    eval_interval: int = field(default=250, metadata=_rng(1))


@dataclass
class ModelSection:
    image_size: int = field(default=32, metadata=_rng(32, 256))
    conv_widths: tuple = field(default=(16, 32), metadata={"item": _rng(1, 1024)})
    d_text: int = field(default=32, metadata=_rng(1, 1024))
    n_hat: int = field(default=32, metadata=_rng(1, 1024))
    embed_dim: int = field(default=32, metadata=_rng(1, 1024))
    depth: int = field(default=1, metadata=_rng(1, 12))
    det_hidden: int = field(default=64, metadata=_rng(1, 4096))
    max_regions: int = field(default=8, metadata=_rng(1, 80))


@dataclass
class DataSection:
    n_regions: int = field(default=8, metadata=_rng(1, 8))
    noise: float = field(default=0.02, metadata=_rng(0, 0.5))
    eval_scenes: int = field(default=64, metadata=_rng(2))
    eval_group: int = field(default=2, metadata=_rng(1))


@dataclass
class LossSection:
    tau: float = field(default=0.07, metadata=_rng(0, 10, lo_open=True))
    topk: int = field(default=3, metadata=_rng(1))


@dataclass
class DistillSection:
    teacher: str = ""
    tau: float = field(default=2.0, metadata=_rng(0, 100, lo_open=True))
    task_weight: float = field(default=1.0, metadata=_rng(0, 100))
    prompt_label: str = "curb line"
    teacher_widths: tuple = field(default=(32, 32), metadata={"item": _rng(1, 1024)})
    student_widths: tuple = field(default=(8, 8), metadata={"item": _rng(1, 1024)})
    teacher_pool: str = field(default="flatten", metadata={"choices": ("gap", "flatten")})
    student_pool: str = field(default="flatten", metadata={"choices": ("gap", "flatten")})
    teacher_epochs: int = field(default=12, metadata=_rng(0))
    epochs: int = field(default=30, metadata=_rng(0))
    batch_size: int = field(default=32, metadata=_rng(1))
    n_classes: int = field(default=8, metadata=_rng(2, 16))
    n_teacher: int = field(default=2048, metadata=_rng(1))
    n_train: int = field(default=1024, metadata=_rng(1))
    n_val: int = field(default=512, metadata=_rng(1))
    compare_seeds: int = field(default=5, metadata=_rng(0))


@dataclass
class TrimSection:
    model: str = ""
    teacher: str = ""
    target_rate: float = field(default=0.5, metadata=_rng(0, 1, lo_open=True, hi_open=True))
    removals_per_layer: int = field(default=3, metadata=_rng(1))
    warmup_steps: int = field(default=-1, metadata=_rng(-1))  # -1: scale from the full schedule
    epochs_per_iter: int = field(default=5, metadata=_rng(0))
    sample_fraction: float = field(default=0.25, metadata=_rng(0, 1, lo_open=True))
    final_epochs: int = field(default=5, metadata=_rng(0))
    plateau_tol: float = field(default=1e-4, metadata=_rng(0))
    plateau_epochs: int = field(default=2, metadata=_rng(1))
    tau: float = field(default=1.0, metadata=_rng(0, 100, lo_open=True))
    task_weight: float = field(default=0.0, metadata=_rng(0, 100))
    widths: tuple = field(default=(32, 32), metadata={"item": _rng(1, 1024)})
    n_classes: int = field(default=8, metadata=_rng(2, 16))
    n_train: int = field(default=1024, metadata=_rng(1))
    n_val: int = field(default=512, metadata=_rng(1))
    baseline_epochs: int = field(default=15, metadata=_rng(0))
    batch_size: int = field(default=32, metadata=_rng(1))
    timing_batch: int = field(default=256, metadata=_rng(1))
    timing_repeats: int = field(default=7, metadata=_rng(1))


@dataclass
class EvalSection:
    checkpoint: str = ""


@dataclass
class FreespaceSection:
    mask: str = ""
    d_safe: float = field(default=0.25, metadata=_rng(0, lo_open=True))
    tolerance: float = field(default=1.0, metadata=_rng(0))
    fx: float = field(default=100.0, metadata=_rng(0, lo_open=True))
    fy: float = field(default=100.0, metadata=_rng(0, lo_open=True))
    cx: float = field(default=63.5)
    cy: float = field(default=47.5)
    height: float = field(default=1.5, metadata=_rng(0, lo_open=True))
    pitch: float = field(default=0.6)
    yaw: float = 0.0
    roll: float = 0.0


@dataclass
class GradcheckSection:
    instances: int = field(default=100, metadata=_rng(1))
    eps: float = field(default=1e-6, metadata=_rng(0, lo_open=True))
    threshold: float = field(default=1e-4, metadata=_rng(0, lo_open=True))
    corrupt: str = ""  # op name whose gradient is deliberately broken (negative control)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    optim: OptimSection = field(default_factory=OptimSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    distill: DistillSection = field(default_factory=DistillSection)
    trim: TrimSection = field(default_factory=TrimSection)
    eval: EvalSection = field(default_factory=EvalSection)
    freespace: FreespaceSection = field(default_factory=FreespaceSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def trim_warmup_steps(self) -> int:
        if self.trim.warmup_steps >= 0:
            return self.trim.warmup_steps
        return round(FULL_T_START * self.optim.max_iters / FULL_MAX_ITERS)

    def items(self) -> list[tuple[str, Any]]:
        out = []
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out.append((f"{sec.name}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self, include_out: bool = True) -> str:
        """Canonical snapshot; parsing it reproduces this config."""
        lines = []
        for key, value in self.items():
            if key == "run.out" and not include_out:
                continue
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


FULL_T_START = 100_000
FULL_MAX_ITERS = 300_000

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {"optim.batch_size": 16, "optim.lr": 1e-3, "optim.max_iters": 2000, "model.max_regions": 8},
    "paper-scale": {
        "optim.batch_size": 80,
        "optim.lr": 1e-3,
        "optim.max_iters": 300_000,
        "model.max_regions": 80,
        "trim.warmup_steps": FULL_T_START,
    },
}


def _field_of(cfg: RunConfig, key: str):
    if key.count(".") != 1:
        raise ConfigError(f"unknown key {key!r}")
    sec, name = key.split(".")
    section = getattr(cfg, sec, None) if sec in {f.name for f in fields(cfg)} else None
    if section is None:
        raise ConfigError(f"unknown section in key {key!r}")
    match = [f for f in fields(section) if f.name == name]
    if not match:
        raise ConfigError(f"unknown key {key!r}")
    return section, match[0]


def _check_range(key: str, value, spec: dict) -> None:
    lo, hi = spec.get("lo"), spec.get("hi")
    if lo is not None and (value < lo or (spec.get("lo_open") and value == lo)):
        raise ConfigError(f"{key} = {value} is below its valid range")
    if hi is not None and (value > hi or (spec.get("hi_open") and value == hi)):
        raise ConfigError(f"{key} = {value} is above its valid range")


def _coerce(key: str, f: dataclasses.Field, raw: Any):
    kind = type(f.default) if f.default is not dataclasses.MISSING else str
    try:
        if kind is tuple:
            items = raw if isinstance(raw, tuple) else tuple(int(x) for x in str(raw).split(",") if x.strip())
            if not items:
                raise ConfigError(f"{key} needs at least one value")
            for it in items:
                _check_range(key, it, f.metadata.get("item", {}))
            return tuple(int(i) for i in items)
        if kind is int:
            if isinstance(raw, str) and not raw.strip().lstrip("+-").isdigit():
                raise ValueError(raw)
            value = int(raw)
        elif kind is float:
            value = float(raw)
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError(raw)
        else:
            value = str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {kind.__name__}") from None
    if "choices" in f.metadata and value not in f.metadata["choices"]:
        raise ConfigError(f"{key} must be one of {f.metadata['choices']}, got {value!r}")
    if kind in (int, float):
        _check_range(key, value, f.metadata)
    return value


def set_value(cfg: RunConfig, key: str, raw: Any) -> None:
    section, f = _field_of(cfg, key)
    setattr(section, f.name, _coerce(key, f, raw))


def parse_lines(text: str) -> list[tuple[int, str, str]]:
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        entries.append((lineno, key, value))
    return entries


def parse_config(text: str, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    entries = parse_lines(text)
    cfg = RunConfig()
    preset = next((v for _, k, v in entries if k == "run.preset"), "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    for key, value in PRESETS[preset].items():
        set_value(cfg, key, value)
    for lineno, key, value in entries:
        try:
            set_value(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    for key, value in (overrides or {}).items():
        set_value(cfg, key, value)
    return cfg


def load_config(path: str | Path, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
