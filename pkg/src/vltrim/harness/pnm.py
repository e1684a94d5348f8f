"""Portable pixel-map images (PGM P2/P5, PPM P3/P6), 8-bit.

Header: magic, width, height, maxval (≤ 255), whitespace separated, with
``#`` comments allowed before the raster. Binary variants are followed by a
single whitespace byte, then the raw raster.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError

_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ConfigError("truncated image header")
        out.append(data[start:pos])
    return out, pos


def decode_pnm(data: bytes) -> np.ndarray:
    """Return ``H×W`` (grey) or ``H×W×3`` (colour) uint8 array."""
    magic = data[:2]
    if magic not in _CHANNELS:
        raise ConfigError(f"unsupported image magic {magic!r}")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ConfigError("non-numeric image header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ConfigError(f"invalid image header {w}×{h} maxval {maxval}")
    ch = _CHANNELS[magic]
    count = w * h * ch
    if magic in (b"P5", b"P6"):
        raw = data[pos + 1:pos + 1 + count]
        if len(raw) != count:
            raise ConfigError("truncated image raster")
        arr = np.frombuffer(raw, dtype=np.uint8)
    else:
        vals = data[pos:].split()
        if len(vals) < count:
            raise ConfigError("truncated image raster")
        arr = np.array([int(v) for v in vals[:count]], dtype=np.int64)
    if arr.max(initial=0) > maxval:
        raise ConfigError("pixel value exceeds maxval")
    arr = arr.astype(np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def encode_pnm(image: np.ndarray, binary: bool = True) -> bytes:
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.ndim == 2:
        magic = b"P5" if binary else b"P2"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6" if binary else b"P3"
    else:
        raise ConfigError(f"cannot encode image of shape {img.shape}")
    img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    if binary:
        return header + img.tobytes()
    rows = [" ".join(str(v) for v in row.reshape(-1)) for row in img]
    return header + ("\n".join(rows) + "\n").encode("ascii")


def read_pnm(path: str | Path) -> np.ndarray:
    try:
        return decode_pnm(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None


def write_pnm(path: str | Path, image: np.ndarray, binary: bool = True) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_pnm(image, binary))


def read_mask(path: str | Path) -> np.ndarray:
    """Boolean mask: a pixel is set when its (mean) value exceeds half range."""
    img = read_pnm(path).astype(float)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img > 127.5
