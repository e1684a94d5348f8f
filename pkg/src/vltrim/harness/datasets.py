"""Classification datasets cached in the checkpoint container.

Images are stored as float64, labels as float64 integers (the container
only carries floating tensors), the class count in the text trailer.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..synthworld import ClassificationSet
from . import checkpoint as ckpt_io


def save_dataset(path: str | Path, data: ClassificationSet, seed: int = 0) -> None:
    tensors = {"images": np.asarray(data.images, dtype=np.float64), "labels": data.labels.astype(np.float64)}
    ckpt_io.save(path, ckpt_io.Checkpoint(tensors, f"n_classes = {data.n_classes}\n", seed))


def load_dataset(path: str | Path) -> ClassificationSet:
    ck = ckpt_io.load(path)
    if set(ck.tensors) != {"images", "labels"} or not ck.config.startswith("n_classes = "):
        raise CheckpointError(f"{path} is not a cached classification dataset")
    labels = ck.tensors["labels"]
    if labels.ndim != 1 or len(labels) != len(ck.tensors["images"]) or np.any(labels != np.round(labels)):
        raise CheckpointError(f"{path}: malformed labels")
    try:
        n_classes = int(ck.config.split("=", 1)[1])
    except ValueError:
        raise CheckpointError(f"{path}: malformed class count") from None
    return ClassificationSet(ck.tensors["images"], labels.astype(np.int64), n_classes)


def cached_classification_set(cache_dir: str | Path, seed: int, n_classes: int, n_samples: int, **kw) -> ClassificationSet:
    """Load a generated set from ``cache_dir`` or generate and store it."""
    from ..synthworld import gen_classification_set

    extra = "".join(f"_{k}{v}" for k, v in sorted(kw.items()))
    path = Path(cache_dir) / f"cls_s{seed}_c{n_classes}_n{n_samples}{extra}.vltc"
    if path.exists():
        return load_dataset(path)
    data = gen_classification_set(seed, n_classes, n_samples, **kw)
    save_dataset(path, data, seed)
    return data
