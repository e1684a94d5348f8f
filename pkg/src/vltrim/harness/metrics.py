"""Append-only metrics stream, one JSON object per line.

Each record carries an ``event`` name, a ``step`` and named numeric fields.
Wall-clock measurements go to a separate timings stream so the metrics of two
identical runs compare byte for byte.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Optional


def _clean(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item"):  # numpy scalars
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


class MetricsWriter:
    def __init__(self, path: Optional[str | Path]):
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def emit(self, event: str, step: int = 0, **fields: Any) -> dict[str, Any]:
        record = {"event": event, "step": int(step), **_clean(fields)}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
