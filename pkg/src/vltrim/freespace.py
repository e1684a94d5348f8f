"""Pinhole camera geometry and 2D mask → ground-plane free space.

Conventions: world frame has z up and the road on the plane z = 0. Camera
frame has x right, y down, z forward; depth is the camera-frame z coordinate.
Pixel ``(row r, col c)`` of a mask has its centre at image point ``(u, v) =
(c, r)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Point, Polygon
from shapely.geometry.base import BaseGeometry
from skimage.measure import approximate_polygon, find_contours

from .errors import BehindCameraError, ContractError, DimensionError, NoIntersectionError, ParameterError

ORTHO_TOL = 1e-10


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraModel:
    """Intrinsics ``K`` and world→camera rigid transform ``x_c = R x_w + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.K.shape != (3, 3) or self.R.shape != (3, 3):
            raise DimensionError("K and R must be 3×3")
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ParameterError("focal lengths fx, fy must be positive")
        if not np.allclose(self.K[2], [0.0, 0.0, 1.0]) or self.K[1, 0] != 0:
            raise ParameterError("K must be upper triangular with last row (0, 0, 1)")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > ORTHO_TOL:
            raise ParameterError("rotation is not orthonormal")
        if np.linalg.det(self.R) <= 0:
            raise ParameterError("rotation must have determinant +1")
        self.K_inv = np.linalg.inv(self.K)

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, R=None, t=None) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t)

    @classmethod
    def from_pose(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        height: float,
        pitch: float,
        yaw: float = 0.0,
        roll: float = 0.0,
        x: float = 0.0,
        y: float = 0.0,
    ) -> "CameraModel":
        """Camera at ``(x, y, height)`` facing world +y, tilted down by ``pitch`` rad."""
        # pitch = 0: camera z along world +y, camera y along world -z
        base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        r_roll = np.array([[math.cos(roll), -math.sin(roll), 0.0], [math.sin(roll), math.cos(roll), 0.0], [0.0, 0.0, 1.0]])
        R = r_roll @ _rot_x(pitch) @ base @ _rot_z(-yaw)
        centre = np.array([x, y, height], dtype=float)
        return cls.from_intrinsics(fx, fy, cx, cy, R, -R @ centre)

    @property
    def T(self) -> np.ndarray:
        """Combined 3×4 projective transform ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def centre(self) -> np.ndarray:
        return -self.R.T @ self.t


def project(p, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """World point(s) → pixel(s) ``(u, v)`` and camera-frame depth."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise DimensionError(f"expected 3D points, got shape {pts.shape}")
    pc = pts @ cam.R.T + cam.t
    d = pc[:, 2]
    if np.any(d <= 0):
        raise BehindCameraError(f"{int(np.sum(d <= 0))} point(s) at non-positive depth")
    h = pc @ cam.K.T
    uv = h[:, :2] / h[:, 2:3]
    return (uv[0], d[0]) if single else (uv, d)


def backproject(v, depth, cam: CameraModel) -> np.ndarray:
    """Pixel(s) with known camera-frame depth → world point(s)."""
    uv = np.atleast_2d(np.asarray(v, dtype=float))
    d = np.atleast_1d(np.asarray(depth, dtype=float))
    rays = np.hstack([uv, np.ones((len(uv), 1))]) @ cam.K_inv.T
    pw = (rays * d[:, None] - cam.t) @ cam.R
    return pw[0] if np.ndim(v) == 1 else pw


def backproject_ground(v, cam: CameraModel) -> np.ndarray:
    """Intersect the viewing ray of pixel(s) with the ground plane z = 0."""
    uv = np.asarray(v, dtype=float)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    rays_c = np.hstack([uv, np.ones((len(uv), 1))]) @ cam.K_inv.T  # camera z = 1
    dirs = rays_c @ cam.R  # world-frame directions
    c = cam.centre
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(dz != 0, -c[2] / np.where(dz != 0, dz, 1.0), np.nan)
    bad = ~(s > 0)
    if np.any(bad):
        raise NoIntersectionError(f"{int(bad.sum())} ray(s) parallel to or pointing away from the ground")
    # solve in camera coordinates: the ray hits z_w = 0 at depth s
    pw = (rays_c * s[:, None] - cam.t) @ cam.R
    pw[:, 2] = 0.0
    return pw[0] if single else pw


def mask_contours(mask: np.ndarray, tolerance: float = 1.0) -> list[np.ndarray]:
    """Closed boundary rings of a boolean mask as ``k×2`` ``(u, v)`` arrays.

    Marching squares at level 0.5 on a zero-padded copy, each ring simplified
    with the given pixel tolerance (0 keeps every vertex).
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError("mask must be 2D")
    padded = np.pad(m.astype(float), 1)
    rings = []
    for c in find_contours(padded, 0.5):
        c = c - 1.0
        if tolerance > 0:
            c = approximate_polygon(c, tolerance=tolerance)
        if len(c) >= 4:
            rings.append(c[:, ::-1].copy())
    return rings


def _as_polygonal(geom: BaseGeometry) -> BaseGeometry:
    geom = shapely.make_valid(geom)
    parts = [g for g in getattr(geom, "geoms", [geom]) if isinstance(g, (Polygon, MultiPolygon)) and not g.is_empty]
    if not parts:
        return Polygon()
    return shapely.union_all(parts)


def ground_polygon(mask: np.ndarray, cam: CameraModel, tolerance: float = 1.0) -> BaseGeometry:
    """Ground-plane region (meters) covered by the mask.

    Each boundary ring maps to the ground through the plane homography, which
    keeps straight edges straight. Rings are combined by even-odd parity so
    inner rings become holes.
    """
    region: BaseGeometry = Polygon()
    for ring in mask_contours(mask, tolerance):
        ground = backproject_ground(ring, cam)[:, :2]
        poly = _as_polygonal(Polygon(ground))
        region = region.symmetric_difference(poly)
    return _as_polygonal(region)


def _vertices(geom: BaseGeometry) -> np.ndarray:
    pts = []
    for poly in getattr(geom, "geoms", [geom]):
        if poly.is_empty:
            continue
        pts.append(np.asarray(poly.exterior.coords))
        pts.extend(np.asarray(r.coords) for r in poly.interiors)
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def erode(region: BaseGeometry, d_safe: float, quad_segs: int = 32) -> BaseGeometry:
    """Points of ``region`` at distance ≥ ``d_safe`` from its boundary.

    Inward offset with round joins. Round joins are polygonised with chords
    that cut inside the true arc, so discs slightly larger than ``d_safe``
    around every vertex are removed as well; the result never contains a
    point closer than ``d_safe`` to the boundary.
    """
    if d_safe <= 0:
        raise ParameterError(f"d_safe must be positive, got {d_safe}")
    if region.is_empty:
        return Polygon()
    inner = region.buffer(-d_safe, quad_segs=quad_segs, join_style="round")
    if inner.is_empty:
        return Polygon()
    radius = d_safe / math.cos(math.pi / (4 * quad_segs)) * (1 + 1e-9)
    verts = _vertices(region)
    near = verts[shapely.distance(shapely.points(verts), inner) < radius]
    if len(near):
        discs = shapely.union_all([Point(p).buffer(radius, quad_segs=quad_segs) for p in near])
        inner = inner.difference(discs)
    return _as_polygonal(inner)


@dataclass
class FreeSpaceRegion:
    mask: np.ndarray
    polygon: BaseGeometry  # free region on the ground, meters
    safe: BaseGeometry  # polygon eroded by d_safe
    d_safe: float
    status: str  # "ok" or "empty"

    @property
    def safe_area(self) -> float:
        return float(self.safe.area)


def mask_to_freespace(mask: np.ndarray, cam: CameraModel, d_safe: float, tolerance: float = 1.0) -> FreeSpaceRegion:
    m = np.asarray(mask, dtype=bool)
    if d_safe <= 0:
        raise ParameterError(f"d_safe must be positive, got {d_safe}")
    if not m.any():
        raise ContractError("free-space mask is empty")
    poly = ground_polygon(m, cam, tolerance)
    safe = erode(poly, d_safe)
    return FreeSpaceRegion(m, poly, safe, d_safe, "empty" if safe.is_empty or safe.area == 0 else "ok")


def format_polygon(geom: BaseGeometry) -> str:
    """Plain-text vertex lists, one ``x y`` pair per line, 6 decimals."""
    lines = []
    polys = [g for g in getattr(geom, "geoms", [geom]) if not g.is_empty]
    for i, poly in enumerate(polys):
        lines.append(f"# polygon {i} exterior")
        lines.extend(f"{x:.6f} {y:.6f}" for x, y in poly.exterior.coords)
        for j, ring in enumerate(poly.interiors):
            lines.append(f"# polygon {i} interior {j}")
            lines.extend(f"{x:.6f} {y:.6f}" for x, y in ring.coords)
    return "\n".join(lines) + "\n"


def camera_for_mask(shape: tuple[int, int], height: float = 10.0, focal: Optional[float] = None) -> CameraModel:
    """Downward-looking camera whose whole image lands on the ground."""
    h, w = shape
    f = focal if focal is not None else float(max(h, w))
    return CameraModel.from_pose(f, f, (w - 1) / 2.0, (h - 1) / 2.0, height=height, pitch=math.pi / 2)
