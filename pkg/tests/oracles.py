"""Independent reference implementations used only by the tests.

Everything here is written the slow, obvious way (explicit loops, full sorts,
pixel counting) so it shares no code path with the package under test.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of one C_in×H×W image, six nested loops."""
    c_in, h, wd = x.shape
    c_out, c_in2, kh, kw = w.shape
    assert c_in == c_in2
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else float(b[co])
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                out[co, i, j] = s
    return out


def info_nce_loops(f_a, f_b, tau):
    """-(1/n) Σ_i log(exp(a_i·b_i/τ) / Σ_j exp(a_i·b_j/τ)), plain loops."""
    n = len(f_a)
    total = 0.0
    for i in range(n):
        num = math.exp(sum(f_a[i][t] * f_b[i][t] for t in range(len(f_a[i]))) / tau)
        den = 0.0
        for j in range(n):
            den += math.exp(sum(f_a[i][t] * f_b[j][t] for t in range(len(f_a[i]))) / tau)
        total += math.log(num / den)
    return -total / n


def topk_full_sort(f_l, f_v, k):
    """Sort every candidate by (-similarity, index) and take the first k."""
    out = []
    for i, q in enumerate(f_l):
        sims = []
        for j, v in enumerate(f_v):
            sims.append((float(np.dot(q, v) / (np.linalg.norm(q) * np.linalg.norm(v))), j))
        sims.sort(key=lambda s: (-s[0], s[1]))
        out.append(tuple(j for _, j in sims[:k]))
    return out


def box_areas_by_counting(pred, target, res=2000):
    """IoU and hull fraction by counting cell centres of a res×res grid on [0,1]²."""
    g = (np.arange(res) + 0.5) / res
    xs, ys = np.meshgrid(g, g)

    def inside(b):
        return (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])

    a, t = inside(pred), inside(target)
    hull = inside((min(pred[0], target[0]), min(pred[1], target[1]), max(pred[2], target[2]), max(pred[3], target[3])))
    cell = 1.0 / res**2
    inter = np.sum(a & t) * cell
    union = np.sum(a | t) * cell
    hull_area = np.sum(hull) * cell
    return inter / union, (hull_area - union) / hull_area


def focal_direct(probs, targets, alpha, gamma):
    vals = []
    for row, t in zip(probs, targets):
        p = max(row[t], 1e-12)
        vals.append(-alpha * (1 - p) ** gamma * math.log(p))
    return sum(vals) / len(vals)


def kl_direct(teacher_logits, student_logits, tau):
    total = 0.0
    for a, b in zip(teacher_logits, student_logits):
        p = np.exp(a / tau) / np.sum(np.exp(a / tau))
        q = np.exp(b / tau) / np.sum(np.exp(b / tau))
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return total / len(teacher_logits)


def merge_fixed_point(segments, scores):
    """Repeat: class each current segment by mean score, join one same-class
    adjacent pair; stop when nothing changes. Returns a partition as a set of
    frozensets of flat pixel indices."""
    labels = segments.copy()
    h, w = labels.shape
    while True:
        classes = {}
        for sid in np.unique(labels):
            classes[sid] = int(np.argmax(scores[labels == sid].mean(axis=0)))
        changed = False
        for r in range(h):
            for c in range(w):
                for dr, dc in ((0, 1), (1, 0)):
                    r2, c2 = r + dr, c + dc
                    if r2 < h and c2 < w:
                        a, b = labels[r, c], labels[r2, c2]
                        if a != b and classes[a] == classes[b]:
                            labels[labels == b] = a
                            changed = True
                            break
                if changed:
                    break
            if changed:
                break
        if not changed:
            return partition(labels)


def partition(labels):
    flat = labels.reshape(-1)
    return {frozenset(np.flatnonzero(flat == v).tolist()) for v in np.unique(flat)}


def region_max_brute(v, pixels):
    """Per-channel max over explicit (row, col) pixels."""
    d = v.shape[0]
    out = np.full(d, -np.inf)
    for r, c in pixels:
        for ch in range(d):
            out[ch] = max(out[ch], v[ch, r, c])
    return out


def point_segment_distance(p, a, b):
    ab = (b[0] - a[0], b[1] - a[1])
    ap = (p[0] - a[0], p[1] - a[1])
    denom = ab[0] ** 2 + ab[1] ** 2
    s = 0.0 if denom == 0 else max(0.0, min(1.0, (ap[0] * ab[0] + ap[1] * ab[1]) / denom))
    q = (a[0] + s * ab[0], a[1] + s * ab[1])
    return math.hypot(p[0] - q[0], p[1] - q[1])


def boundary_distances(points, rings):
    """Min distance from each point to any segment of the given closed rings."""
    segs = []
    for ring in rings:
        ring = np.asarray(ring)
        segs.extend(zip(ring[:-1], ring[1:]))
    a = np.array([s[0] for s in segs])
    b = np.array([s[1] for s in segs])
    out = []
    for p in np.asarray(points):
        ab = b - a
        denom = np.sum(ab * ab, axis=1)
        s = np.clip(np.sum((p - a) * ab, axis=1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
        q = a + s[:, None] * ab
        out.append(np.min(np.hypot(p[0] - q[:, 0], p[1] - q[:, 1])))
    return np.array(out)


def rings_of(geom):
    rings = []
    for poly in getattr(geom, "geoms", [geom]):
        if poly.is_empty:
            continue
        rings.append(np.asarray(poly.exterior.coords))
        rings.extend(np.asarray(r.coords) for r in poly.interiors)
    return rings


def scene_pixel_scan(image, box, color, shape, tol):
    """Scan rows of the box; every pixel the shape covers must match its colour."""
    x0, y0, x1, y1 = (int(v) for v in box)
    cx, cy, r = (x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0
    for y in range(y0, y1):
        for x in range(x0, x1):
            covered = True
            if shape == "disc":
                covered = (x + 0.5 - cx) ** 2 + (y + 0.5 - cy) ** 2 <= r * r
            if covered and np.max(np.abs(image[:, y, x] - np.asarray(color))) > tol:
                return False
    return True
