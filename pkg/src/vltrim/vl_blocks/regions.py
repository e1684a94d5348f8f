"""Region sets and regional max-pooling of visual feature maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from ..tensor import Tensor, as_tensor, make_op


@dataclass
class RegionSet:
    """Regions over an ``H×W`` feature map.

    Each region is either a half-open integer box ``(x0, y0, x1, y1)`` or an
    explicit array of ``(row, col)`` pixel coordinates.
    """

    regions: list = field(default_factory=list)
    max_regions: Optional[int] = None

    @classmethod
    def from_boxes(cls, boxes, height: int, width: int, max_regions: Optional[int] = None) -> "RegionSet":
        """Snap real-valued pixel boxes outward to the integer grid, clamped to the map."""
        out = []
        for x0, y0, x1, y1 in np.asarray(boxes, dtype=float).reshape(-1, 4):
            ix0 = int(np.clip(np.floor(x0), 0, width - 1))
            iy0 = int(np.clip(np.floor(y0), 0, height - 1))
            ix1 = int(np.clip(np.ceil(x1), ix0 + 1, width))
            iy1 = int(np.clip(np.ceil(y1), iy0 + 1, height))
            out.append((ix0, iy0, ix1, iy1))
        return cls(out, max_regions)

    def __len__(self) -> int:
        return len(self.regions)

    def flat_indices(self, height: int, width: int) -> list[np.ndarray]:
        """Validated row-major flat pixel indices of each region, ascending."""
        if self.max_regions is not None and len(self.regions) > self.max_regions:
            raise ContractError(f"{len(self.regions)} regions exceed the maximum {self.max_regions}")
        result = []
        for r in self.regions:
            if isinstance(r, tuple) and len(r) == 4 and all(np.isscalar(v) for v in r):
                x0, y0, x1, y1 = (int(v) for v in r)
                if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                    raise ContractError(f"box {r} empty or outside {height}x{width} map")
                ys, xs = np.mgrid[y0:y1, x0:x1]
                idx = (ys * width + xs).reshape(-1)
            else:
                pix = np.asarray(r, dtype=int).reshape(-1, 2)
                if pix.shape[0] == 0:
                    raise ContractError("empty region")
                rows, cols = pix[:, 0], pix[:, 1]
                if rows.min() < 0 or cols.min() < 0 or rows.max() >= height or cols.max() >= width:
                    raise ContractError(f"region pixels outside {height}x{width} map")
                idx = np.unique(rows * width + cols)
            result.append(np.sort(idx))
        return result


def region_pool(V, regions: RegionSet) -> Tensor:
    """Per-region, per-channel maximum of a ``d×H×W`` map: ``d×n_regions``.

    Gradient flows to the first maximal pixel (lowest flat index) per channel.
    """
    V = as_tensor(V)
    if V.ndim != 3:
        raise DimensionError(f"region_pool expects a d×H×W map, got {V.shape}")
    d, h, w = V.shape
    idx_sets = regions.flat_indices(h, w)
    if not idx_sets:
        raise ContractError("region set is empty")
    flat = V.data.reshape(d, h * w)
    n = len(idx_sets)
    out = np.empty((d, n), dtype=V.dtype)
    arg = np.empty((d, n), dtype=np.int64)
    rows = np.arange(d)
    for j, idx in enumerate(idx_sets):
        sub = flat[:, idx]
        a = np.argmax(sub, axis=1)
        out[:, j] = sub[rows, a]
        arg[:, j] = idx[a]

    def bw(g):
        full = np.zeros((d, h * w), dtype=V.dtype)
        np.add.at(full, (np.repeat(rows, n), arg.reshape(-1)), g.reshape(-1))
        return (full.reshape(d, h, w),)

    return make_op(out, (V,), bw, "region_pool")


def box_geometry(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """``4×n`` normalized box coordinates, appended to pooled features."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scale = np.array([width, height, width, height], dtype=float)
    return (b / scale).T.copy()


def pool_regions(V, boxes: Sequence, max_regions: Optional[int] = None) -> Tensor:
    V = as_tensor(V)
    _, h, w = V.shape
    return region_pool(V, RegionSet.from_boxes(boxes, h, w, max_regions))
