"""Exact geometry on the camera action sphere S²(r) centred at the viewpoint centroid.

Points are stored in world coordinates; most computations run on unit vectors
``(p - center) / radius`` and are scaled back on the way out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateHullError,
    DegenerateLogError,
    DegeneratePathError,
    InsufficientPointsError,
    InvalidInputError,
    NonHemisphericError,
    UndefinedDirectionError,
)

ON_SPHERE_RTOL = 1e-9
TANGENT_RTOL = 1e-9
MERGE_RTOL = 1e-9
DEFAULT_SPACING_FRACTION = 0.02


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise InvalidInputError(f"expected a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("non-finite coordinates")
    return v


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class SphereChart:
    """Sphere of radius ``radius`` about ``center``; optionally restricted to z >= center.z."""

    center: np.ndarray
    radius: float
    hemisphere: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise InvalidInputError(f"radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))
        self.center.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, SphereChart):
            return NotImplemented
        return (
            self is other
            or (
                self.radius == other.radius
                and self.hemisphere == other.hemisphere
                and bool(np.array_equal(self.center, other.center))
            )
        )

    def __hash__(self):
        return hash((tuple(self.center), self.radius, self.hemisphere))

    def __repr__(self):
        c = ", ".join(f"{x:g}" for x in self.center)
        return f"SphereChart(center=({c}), radius={self.radius:g}, hemisphere={self.hemisphere})"

    def point(self, xyz) -> "SpherePoint":
        """Validate a world position as a point of this chart."""
        return SpherePoint(_as_vec3(xyz), self)

    def from_unit(self, u) -> "SpherePoint":
        u = np.asarray(u, dtype=float)
        return SpherePoint(self.center + self.radius * (u / np.linalg.norm(u)), self)

    def from_angles(self, elevation: float, azimuth: float) -> "SpherePoint":
        ce = math.cos(elevation)
        return self.from_unit(
            [ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)]
        )

    def contains(self, xyz) -> bool:
        x = np.asarray(xyz, dtype=float)
        ok = abs(np.linalg.norm(x - self.center) - self.radius) <= ON_SPHERE_RTOL * self.radius
        if self.hemisphere:
            ok = ok and x[2] >= self.center[2] - ON_SPHERE_RTOL * self.radius
        return bool(ok)


@dataclass(frozen=True, eq=False)
class SpherePoint:
    position: np.ndarray
    chart: SphereChart

    def __post_init__(self):
        chart = self.chart
        d = np.linalg.norm(self.position - chart.center)
        if abs(d - chart.radius) > ON_SPHERE_RTOL * chart.radius:
            raise InvalidInputError(
                f"point at distance {d!r} from center is off the sphere of radius {chart.radius!r}"
            )
        if chart.hemisphere and self.position[2] < chart.center[2] - ON_SPHERE_RTOL * chart.radius:
            raise NonHemisphericError("point lies below the chart's horizon")
        self.position.setflags(write=False)

    @property
    def unit(self) -> np.ndarray:
        return (self.position - self.chart.center) / self.chart.radius

    def __repr__(self):
        return "SpherePoint(({:.6g}, {:.6g}, {:.6g}))".format(*self.position)


@dataclass(frozen=True, eq=False)
class TangentVector:
    base: SpherePoint
    direction: np.ndarray

    def __post_init__(self):
        d = _as_vec3(self.direction)
        n = self.base.unit
        r = self.base.chart.radius
        dn = float(np.linalg.norm(d))
        if abs(float(d @ n)) * r > TANGENT_RTOL * r * max(dn, 1.0):
            raise InvalidInputError("direction is not tangent at its base point")
        object.__setattr__(self, "direction", d)
        d.setflags(write=False)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))

    def normalized(self) -> "TangentVector":
        n = self.norm
        if n == 0.0:
            raise UndefinedDirectionError("cannot normalize the zero tangent vector")
        return TangentVector(self.base, self.direction / n)


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    """Great-circle arc from ``start`` to ``end`` sampled at uniform arc length."""

    start: SpherePoint
    end: SpherePoint
    samples: np.ndarray = field(repr=False)
    length: float

    @property
    def points(self) -> list[SpherePoint]:
        return [SpherePoint(s.copy(), self.start.chart) for s in self.samples]

    @property
    def chart(self) -> SphereChart:
        return self.start.chart


def _same_chart(p: SpherePoint, q: SpherePoint) -> SphereChart:
    if p.chart != q.chart:
        raise InvalidInputError("points belong to different charts")
    return p.chart


def tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (e1, e2) spanning the plane normal to unit ``n`` with e1 x e2 = n."""
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _normalize(a - (a @ n) * n)
    return e1, np.cross(n, e1)


def unit_angle(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Angle between unit vectors; rows of ``q`` are broadcast against ``p``."""
    # half-angle form: exactly symmetric in p and q, accurate near 0 and pi
    d = q - p
    s = q + p
    return 2.0 * np.arctan2(np.sqrt(np.sum(d * d, axis=-1)), np.sqrt(np.sum(s * s, axis=-1)))


def unit_log(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Logarithm on the unit sphere at ``p`` for one point or a stack of points ``q``."""
    q = np.atleast_2d(q)
    cos_t = q @ p
    w = q - cos_t[:, None] * p
    s = np.sqrt(np.einsum("ij,ij->i", w, w))
    theta = np.arctan2(s, cos_t)
    if np.any((s < 1e-15) & (cos_t < 0)):
        raise DegenerateLogError("logarithm undefined for antipodal points")
    scale = np.divide(theta, s, out=np.ones_like(s), where=s > 0)
    return w * scale[:, None]


def unit_exp(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    t = float(np.linalg.norm(v))
    if t == 0.0:
        return p.copy()
    q = math.cos(t) * p + (math.sin(t) / t) * v
    return q / np.linalg.norm(q)


def geodesic_distance(p: SpherePoint, q: SpherePoint) -> float:
    chart = _same_chart(p, q)
    return chart.radius * float(unit_angle(p.unit, q.unit))


def exp_map(v: TangentVector) -> SpherePoint:
    chart = v.base.chart
    n = v.base.unit
    d = v.direction - (v.direction @ n) * n
    return chart.from_unit(unit_exp(n, d / chart.radius))


def log_map(p: SpherePoint, q: SpherePoint) -> TangentVector:
    chart = _same_chart(p, q)
    v = unit_log(p.unit, q.unit)[0] * chart.radius
    return TangentVector(p, v)


def geodesic_path(p: SpherePoint, q: SpherePoint, max_spacing: float | None = None) -> GeodesicPath:
    chart = _same_chart(p, q)
    if max_spacing is None:
        max_spacing = DEFAULT_SPACING_FRACTION * chart.radius
    if not max_spacing > 0:
        raise InvalidInputError("max_spacing must be positive")
    a, b = p.unit, q.unit
    c = float(a @ b)
    w = b - c * a
    s = math.sqrt(float(w @ w))
    theta = float(unit_angle(a, b))
    if theta == 0.0:
        return GeodesicPath(p, q, p.position[None, :].copy(), 0.0)
    length = chart.radius * theta
    count = math.ceil(length / max_spacing) + 1
    if s < 1e-15:
        if c < 0:
            raise DegeneratePathError("geodesic between antipodal points is not unique")
        # endpoints a rounding error apart: no usable direction, keep just the two
        return GeodesicPath(p, q, np.stack([p.position, q.position]), length)
    ang = np.arange(count) * (theta / (count - 1))
    units = np.outer(np.cos(ang), a) + np.outer(np.sin(ang), w / s)
    samples = chart.center + chart.radius * units
    samples[0], samples[-1] = p.position, q.position
    return GeodesicPath(p, q, samples, length)


def radial_project(x, chart: SphereChart) -> SpherePoint:
    """Push ``x`` along the ray from the chart centre onto the sphere."""
    x = _as_vec3(x)
    d = x - chart.center
    n = float(np.linalg.norm(d))
    if n == 0.0:
        raise UndefinedDirectionError("cannot project the sphere centre")
    return SpherePoint(chart.center + d * (chart.radius / n), chart)


def merge_duplicates(units: np.ndarray, tol: float = MERGE_RTOL) -> list[int]:
    """Indices of points with no earlier point within chordal distance ``tol``."""
    diff = units[:, None, :] - units[None, :, :]
    close = np.einsum("ijk,ijk->ij", diff, diff) <= tol * tol
    dup = np.triu(close, 1).any(axis=0)
    return [int(i) for i in np.flatnonzero(~dup)]


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def planar_hull(xy: np.ndarray, idx: Sequence[int]) -> list[int]:
    """Andrew's monotone chain; CCW order, collinear points dropped."""
    order = sorted(idx, key=lambda i: (xy[i, 0], xy[i, 1]))
    span = float(np.ptp(xy[list(idx)], axis=0).max()) if len(idx) else 0.0
    eps = 1e-12 * span * span

    def half(seq):
        chain: list[int] = []
        for i in seq:
            while len(chain) >= 2 and _cross2(xy[chain[-2]], xy[chain[-1]], xy[i]) <= eps:
                chain.pop()
            chain.append(i)
        return chain

    lower, upper = half(order), half(order[::-1])
    return lower[:-1] + upper[:-1]


def gnomonic(units: np.ndarray, center: np.ndarray) -> np.ndarray:
    e1, e2 = tangent_basis(center)
    depth = units @ center
    return np.column_stack([units @ e1, units @ e2]) / depth[:, None]


def hemisphere_center(units: np.ndarray) -> np.ndarray:
    s = units.sum(axis=0)
    n = np.linalg.norm(s)
    if n < 1e-12:
        raise NonHemisphericError("points are balanced around the sphere centre")
    c = s / n
    if np.any(units @ c <= 1e-12):
        raise NonHemisphericError("points do not fit inside one open hemisphere")
    return c


def spherical_convex_hull(points: Sequence[SpherePoint]) -> list[int]:
    """Indices of hull vertices, counter-clockwise seen from outside the sphere."""
    if len(points) < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {len(points)}")
    for p in points[1:]:
        _same_chart(points[0], p)
    units = np.array([p.unit for p in points])
    return unit_convex_hull(units)


def unit_convex_hull(units: np.ndarray) -> list[int]:
    keep = merge_duplicates(units)
    if len(keep) < 3:
        raise InsufficientPointsError(f"only {len(keep)} distinct points")
    c = hemisphere_center(units[keep])
    xy = np.zeros((len(units), 2))
    xy[keep] = gnomonic(units[keep], c)
    hull = planar_hull(xy, keep)
    if len(hull) < 3:
        raise DegenerateHullError("points lie on a single great circle")
    poly = xy[hull]
    area = 0.5 * float(np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1]))
    span = float(np.ptp(poly, axis=0).max())
    if area <= 1e-12 * span * span:
        raise DegenerateHullError("hull has no interior")
    return hull


def winding_signs(loop: np.ndarray, query: np.ndarray) -> np.ndarray:
    """det[a_i, a_{i+1}, q] for every loop edge (rows) and query point (cols), unit vectors.

    A point is inside or on a CCW convex loop iff every entry of its column is >= 0.
    """
    a = loop
    b = np.roll(loop, -1, axis=0)
    normals = np.cross(a, b)
    return normals @ np.atleast_2d(query).T


def tangent_of_path_at(path: GeodesicPath, at: SpherePoint) -> TangentVector:
    chart = path.chart
    _same_chart(path.start, at)
    tol = ON_SPHERE_RTOL * chart.radius
    if np.linalg.norm(at.position - path.start.position) <= tol:
        base, far = path.start, path.end
    elif np.linalg.norm(at.position - path.end.position) <= tol:
        base, far = path.end, path.start
    else:
        raise InvalidInputError("query point is not an endpoint of the path")
    if path.length == 0.0:
        raise InvalidInputError("zero-length path has no tangent")
    return log_map(base, far).normalized()
