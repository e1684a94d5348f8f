"""Semantic merging of over-segmented masks.

Each input segment gets a class: the argmax (lowest index on ties) of its
mean per-pixel class scores. Segments that touch under 4-connectivity and
share that class are unioned. Because every member's mean score peaks at the
same class, the union's mean peaks there too, so one pass reaches the fixed
point and the operation is idempotent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class SegmentMap:
    segments: np.ndarray  # H x W integer ids
    scores: np.ndarray  # H x W x C, rows sum to 1
    classes: Optional[dict[int, int]] = None  # segment id -> class, set by merge

    @property
    def n_segments(self) -> int:
        return len(np.unique(self.segments))


def segment_classes(segments: np.ndarray, scores: np.ndarray) -> dict[int, int]:
    ids, inverse = np.unique(segments.reshape(-1), return_inverse=True)
    c = scores.shape[-1]
    sums = np.zeros((len(ids), c))
    np.add.at(sums, inverse, scores.reshape(-1, c))
    counts = np.bincount(inverse, minlength=len(ids))[:, None]
    return {int(i): int(k) for i, k in zip(ids, np.argmax(sums / counts, axis=1))}


def adjacent_pairs(segments: np.ndarray) -> np.ndarray:
    """Unique unordered pairs of distinct ids that touch under 4-connectivity."""
    pairs = [
        np.stack([segments[:, :-1].reshape(-1), segments[:, 1:].reshape(-1)], axis=1),
        np.stack([segments[:-1, :].reshape(-1), segments[1:, :].reshape(-1)], axis=1),
    ]
    p = np.concatenate(pairs)
    p = p[p[:, 0] != p[:, 1]]
    if p.size == 0:
        return p.reshape(0, 2)
    return np.unique(np.sort(p, axis=1), axis=0)


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller id wins so output ids are deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def relabel(segments: np.ndarray) -> np.ndarray:
    """Renumber ids 0..k-1 in order of first appearance (row-major)."""
    _, first, inverse = np.unique(segments.reshape(-1), return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse].reshape(segments.shape)


def merge_segments(seg: SegmentMap) -> SegmentMap:
    """Union adjacent segments whose majority class agrees."""
    classes = segment_classes(seg.segments, seg.scores)
    uf = _UnionFind(classes)
    for a, b in adjacent_pairs(seg.segments):
        if classes[int(a)] == classes[int(b)]:
            uf.union(int(a), int(b))
    roots = np.vectorize(uf.find, otypes=[np.int64])(seg.segments) if seg.segments.size else seg.segments
    merged = relabel(roots)
    new_ids, first = np.unique(merged.reshape(-1), return_index=True)
    old_at = seg.segments.reshape(-1)[first]
    root_class = {int(n): classes[int(o)] for n, o in zip(new_ids, old_at)}
    return SegmentMap(merged, seg.scores, root_class)
