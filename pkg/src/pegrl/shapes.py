"""Peg cross-sections and 2D polygon utilities.

Polygons are (N, 2) float arrays in counter-clockwise order with the centroid
at the origin.  The hole opening is the peg polygon dilated outward by the
radial clearance.  Circles are represented as 32-gons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SHAPE_NAMES = (
    "square",
    "triangle",
    "pentagon",
    "circle",
    "hexagon",
    "semicircle",
    "cross",
)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    cx = np.sum((x + xn) * cross) / (6 * a)
    cy = np.sum((y + yn) * cross) / (6 * a)
    return np.array([cx, cy])


def _regular_polygon(n: int, radius: float, phase: float = np.pi / 2) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


@dataclass
class PegShape:
    """Peg cross-section polygon plus the required insertion depth."""

    name: str
    cross_section: np.ndarray
    d_ins: float = 0.010
    symmetry_order: int = 1  # rotational symmetry used for yaw folding

    def __post_init__(self):
        poly = np.asarray(self.cross_section, dtype=float)
        if polygon_area(poly) < 0:
            poly = poly[::-1].copy()
        c = polygon_centroid(poly)
        self.cross_section = poly - c
        if self.d_ins <= 0:
            raise ConfigError("insertion depth must be positive")

    @property
    def perimeter(self) -> float:
        p = self.cross_section
        return float(np.sum(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)))


def make_shape(name: str, d_ins: float = 0.010) -> PegShape:
    """Factory for the seven peg cross-sections (sizes in metres)."""
    if name == "square":
        a = 0.030
        poly = np.array(
            [[a / 2, a / 2], [-a / 2, a / 2], [-a / 2, -a / 2], [a / 2, -a / 2]]
        )
        sym = 4
    elif name == "triangle":
        poly = _regular_polygon(3, 0.034 / np.sqrt(3.0))
        sym = 3
    elif name == "pentagon":
        poly = _regular_polygon(5, 0.017)
        sym = 5
    elif name == "circle":
        poly = _regular_polygon(32, 0.015)
        sym = 32
    elif name == "hexagon":
        poly = _regular_polygon(6, 0.016)
        sym = 6
    elif name == "semicircle":
        r = 0.017
        arc = np.linspace(0.0, np.pi, 17)
        poly = np.stack([r * np.cos(arc), r * np.sin(arc)], axis=1)
        sym = 1
    elif name == "cross":
        h, t = 0.015, 0.006
        poly = np.array(
            [
                [t, t], [t, h], [-t, h], [-t, t], [-h, t], [-h, -t],
                [-t, -t], [-t, -h], [t, -h], [t, -t], [h, -t], [h, t],
            ]
        )
        sym = 4
    else:
        raise ConfigError(f"unknown shape {name!r}; choose from {SHAPE_NAMES}")
    return PegShape(name=name, cross_section=poly, d_ins=d_ins, symmetry_order=sym)


def dilate(poly: np.ndarray, offset: float) -> np.ndarray:
    """Offset a polygon outward by `offset` (miter joins).

    Valid for the small clearances used here (offset well below the local
    feature size), including the mildly reflex vertices of the cross shape.
    """
    if offset < 0:
        raise ConfigError("dilation offset must be nonnegative")
    if offset == 0:
        return poly.copy()
    n = len(poly)
    out = np.empty_like(poly)
    edges = np.roll(poly, -1, axis=0) - poly
    lens = np.linalg.norm(edges, axis=1)
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lens[:, None]
    for i in range(n):
        n_prev = normals[i - 1]
        n_cur = normals[i]
        denom = 1.0 + float(n_prev @ n_cur)
        out[i] = poly[i] + offset * (n_prev + n_cur) / denom
    return out


def boundary_points(poly: np.ndarray, n: int) -> np.ndarray:
    """n deterministic samples of the polygon boundary.

    Every vertex is included (corners are the extreme points that decide
    containment); the remainder is spread along edges proportionally to
    length.
    """
    nv = len(poly)
    if n < nv:
        raise ConfigError(f"need at least {nv} boundary points for this polygon")
    edges = np.roll(poly, -1, axis=0) - poly
    lens = np.linalg.norm(edges, axis=1)
    extra = n - nv
    # largest-remainder apportionment of the extra points
    quota = lens / lens.sum() * extra
    counts = np.floor(quota).astype(int)
    rem = extra - counts.sum()
    if rem > 0:
        order = np.argsort(-(quota - counts))
        counts[order[:rem]] += 1
    pts = []
    for i in range(nv):
        pts.append(poly[i])
        m = counts[i]
        for k in range(m):
            t = (k + 1) / (m + 1)
            pts.append(poly[i] + t * edges[i])
    return np.asarray(pts)


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Crossing-number containment test, vectorized over points."""
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    x0 = poly[:, 0][None, :]
    y0 = poly[:, 1][None, :]
    x1 = np.roll(poly[:, 0], -1)[None, :]
    y1 = np.roll(poly[:, 1], -1)[None, :]
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = (x1 - x0) * (py - y0) / (y1 - y0) + x0
    crossing = straddle & (px < x_int)
    return np.sum(crossing, axis=1) % 2 == 1


def distance_to_boundary(points: np.ndarray, poly: np.ndarray):
    """Distance from each point to the polygon boundary and the closest
    boundary point.  Returns (dist (N,), closest (N, 2))."""
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    ab = b - a
    ab2 = np.sum(ab * ab, axis=2)
    p = points[:, None, :]
    t = np.clip(np.sum((p - a) * ab, axis=2) / ab2, 0.0, 1.0)
    c = a + t[:, :, None] * ab
    d2 = np.sum((p - c) ** 2, axis=2)
    idx = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    return np.sqrt(d2[rows, idx]), c[rows, idx]


def signed_distance(points: np.ndarray, poly: np.ndarray):
    """Signed lateral distance to the polygon: positive outside, negative
    inside.  Also returns the closest boundary point per query point."""
    dist, closest = distance_to_boundary(points, poly)
    inside = points_in_polygon(points, poly)
    sd = np.where(inside, -dist, dist)
    return sd, closest


def rot2d(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return (theta + np.pi) % (2 * np.pi) - np.pi


def fold_angle(theta: float, symmetry_order: int) -> float:
    """Fold an angular misalignment into the shape's fundamental sector.

    A peg with n-fold rotational symmetry is aligned whenever the relative
    yaw is a multiple of 2 pi / n, so the effective misalignment lives in
    [-pi/n, pi/n)."""
    period = 2 * np.pi / symmetry_order
    return float(theta - period * np.round(theta / period))


@dataclass
class HoleSpec:
    """Hole opening: the peg polygon dilated by the clearance, at a pose."""

    shape: PegShape
    clearance: float
    pose: np.ndarray = field(default_factory=lambda: np.zeros(3))  # x, y, yaw
    plane_z: float = 0.0
    depth: float = 0.011

    def __post_init__(self):
        if self.clearance <= 0:
            raise ConfigError("clearance must be positive")
        self.pose = np.asarray(self.pose, dtype=float)
        self.opening = dilate(self.shape.cross_section, self.clearance)

    @property
    def bottom_z(self) -> float:
        return self.plane_z - self.depth

    def world_to_hole(self, pts_world: np.ndarray) -> np.ndarray:
        return (pts_world - self.pose[:2]) @ rot2d(self.pose[2])
