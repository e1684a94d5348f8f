from .checkpoint import Checkpoint, decode, encode, load, save
from .config import PRESETS, RunConfig, load_config, parse_config
from .metrics import MetricsWriter, read_metrics
from .runs import RUNNERS, RunResult, run_distill, run_eval, run_freespace, run_gradcheck, run_pretrain, run_trim

__all__ = [
    "Checkpoint",
    "decode",
    "encode",
    "load",
    "save",
    "PRESETS",
    "RunConfig",
    "load_config",
    "parse_config",
    "MetricsWriter",
    "read_metrics",
    "RUNNERS",
    "RunResult",
    "run_distill",
    "run_eval",
    "run_freespace",
    "run_gradcheck",
    "run_pretrain",
    "run_trim",
]
