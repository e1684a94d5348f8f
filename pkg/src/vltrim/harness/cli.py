"""Command-line entry point.

Exit codes: 0 success, 2 configuration / input error (including malformed
checkpoints and images), 3 numeric failure (non-finite loss, failed gradient
check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..errors import (
    BehindCameraError,
    CheckpointError,
    ConfigError,
    ContractError,
    NoIntersectionError,
    NumericError,
    ParameterError,
)
from .config import TASKS, load_config
from .runs import RUNNERS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("vltrim")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vltrim", description="Region-text pretraining, distillation and trimming toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output directory (overrides run.out)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"run.seed": args.seed} if args.seed is not None else {}
        cfg = load_config(args.config, overrides)
        if cfg.run.task and cfg.run.task != args.task:
            raise ConfigError(f"config is for task {cfg.run.task!r}, not {args.task!r}")
        result = RUNNERS[args.task](cfg, args.out)
    except (ConfigError, CheckpointError, ParameterError, ContractError, NoIntersectionError, BehindCameraError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{result.task}: {result.status} ({result.out})")
    for key, value in sorted(result.summary.items()):
        if isinstance(value, float):
            print(f"  {key} = {value:.6g}")
        elif isinstance(value, (int, str)):
            print(f"  {key} = {value}")
    if result.task == "gradcheck" and result.status != "pass":
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
