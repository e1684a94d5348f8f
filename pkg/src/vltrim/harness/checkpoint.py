"""Binary checkpoint container.

Layout, all integers little-endian::

    b"VLTC"                      magic
    u32 version                  currently 1
    u32 count                    number of tensors
    count × {
        u32 name_len, name (UTF-8)
        u32 rank, rank × u64 dims
        u8 dtype tag             1 = float32, 2 = float64
        raw little-endian element data, C order
    }
    u32 config_len, config snapshot (UTF-8 text)
    u64 seed

Tensors are written in sorted name order so identical state produces
identical bytes.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import CheckpointError

MAGIC = b"VLTC"
VERSION = 1
DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: str = ""
    seed: int = 0


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        tag = DTYPE_TAGS[arr.dtype]
        buf.write(struct.pack("<B", tag))
        buf.write(np.ascontiguousarray(arr, dtype=TAG_DTYPES[tag]).tobytes())
    cfg = ckpt.config.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", ckpt.seed))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        (rank,) = r.unpack("<I")
        if rank > 32:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}Q")
        (tag,) = r.unpack("<B")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown element type tag {tag}")
        dtype = TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    (cfg_len,) = r.unpack("<I")
    try:
        config = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config snapshot is not valid UTF-8") from None
    (seed,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(tensors, config, seed)


def save(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(data)
