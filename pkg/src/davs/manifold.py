"""Dynamic active vision space: the per-step camera action subspace built from SOI keypoints.

Pipeline: keypoints -> middle-sphere projection -> convex SOI loop -> ray trace onto
the camera sphere -> piecewise-geodesic boundary -> Karcher centroid O0 -> boundary
points P1/P2 on the great circle perpendicular to P0->O0 at O0 -> three-geodesic
region P0-P1-P2 and the tangent frame used to sample camera directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFrameError,
    DegenerateHullError,
    InsufficientPointsError,
    InvalidInputError,
    MalformedBoundaryError,
    NonHemisphericError,
    UndefinedDirectionError,
)
from .karcher import FrechetProblem, karcher_mean
from .sphere import (
    DEFAULT_SPACING_FRACTION,
    GeodesicPath,
    SphereChart,
    SpherePoint,
    TangentVector,
    geodesic_distance,
    geodesic_path,
    merge_duplicates,
    unit_angle,
    unit_convex_hull,
    unit_log,
    winding_signs,
)

INSIDE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SoiKeypointSet:
    keypoints: np.ndarray
    t: int = 0

    def __post_init__(self):
        k = np.asarray(self.keypoints, dtype=float)
        if k.ndim != 2 or k.shape[1] != 3:
            raise InvalidInputError(f"keypoints must be an (N, 3) array, got shape {k.shape}")
        if not np.all(np.isfinite(k)):
            raise InvalidInputError("non-finite keypoint coordinates")
        if len(k) < 3:
            raise InsufficientPointsError(f"insufficient keypoints: need at least 3, got {len(k)}")
        object.__setattr__(self, "keypoints", k)

    def __len__(self):
        return len(self.keypoints)


@dataclass(frozen=True, eq=False)
class SoiPolygon:
    chart: SphereChart
    middle_radius: float
    hull_indices: tuple[int, ...]
    middle_points: np.ndarray  # X* on the middle sphere, loop order
    action_points: np.ndarray  # X' on the camera sphere, loop order

    @property
    def action_units(self) -> np.ndarray:
        return (self.action_points - self.chart.center) / self.chart.radius

    def vertices(self) -> list[SpherePoint]:
        return [self.chart.point(x) for x in self.action_points]

    def contains(self, p: SpherePoint, tol: float = INSIDE_TOL) -> bool:
        return bool(np.all(winding_signs(self.action_units, p.unit) >= -tol))


@dataclass(frozen=True)
class DavsConfig:
    spacing_fraction: float = DEFAULT_SPACING_FRACTION  # boundary sample spacing, in units of r
    karcher_tol: float = 1e-9
    karcher_max_iter: int = 100

    def max_spacing(self, chart: SphereChart) -> float:
        return self.spacing_fraction * chart.radius


@dataclass(frozen=True, eq=False)
class DavsManifold:
    chart: SphereChart
    p0: SpherePoint
    o0: SpherePoint
    p1: SpherePoint
    p2: SpherePoint
    paths: tuple[GeodesicPath, GeodesicPath, GeodesicPath]  # P0->P1, P1->P2, P2->P0
    boundary: tuple[GeodesicPath, ...]  # refined manifold boundary, X'_i -> X'_{i+1}
    polygon: SoiPolygon
    clipped: bool = False


@dataclass(frozen=True, eq=False)
class TangentFrame:
    base: SpherePoint
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    theta1: float
    theta2: float

    @property
    def normal(self) -> np.ndarray:
        return self.base.unit

    def cone(self, omega: float) -> tuple[float, float]:
        """Angular sampling interval measured counter-clockwise from v2."""
        return self.theta2 * (1.0 - omega), self.theta2 + self.theta1 * omega

    def direction_at(self, alpha: float) -> np.ndarray:
        left = np.cross(self.normal, self.v2)
        d = math.cos(alpha) * self.v2 + math.sin(alpha) * left
        return d / np.linalg.norm(d)

    def angle_of(self, direction) -> float:
        """Counter-clockwise angle of a tangent direction from v2, in [0, 2*pi)."""
        d = np.asarray(direction, dtype=float)
        left = np.cross(self.normal, self.v2)
        a = math.atan2(float(d @ left), float(d @ self.v2))
        return a % (2 * math.pi)


def build_soi_polygon(kps: SoiKeypointSet, chart: SphereChart) -> SoiPolygon:
    rel = kps.keypoints - chart.center
    norms = np.linalg.norm(rel, axis=1)
    if np.any(norms <= 1e-12 * chart.radius):
        raise UndefinedDirectionError("a keypoint coincides with the viewpoint centroid")
    middle_radius = float(norms.max())
    units = rel / norms[:, None]
    if len(merge_duplicates(units)) < 3:
        raise DegenerateHullError("keypoints collapse to fewer than 3 directions")
    hull = unit_convex_hull(units)
    loop = units[hull]
    if chart.hemisphere and np.any(loop[:, 2] < -1e-9):
        raise NonHemisphericError("projected SOI falls below the camera horizon")
    return SoiPolygon(
        chart,
        middle_radius,
        tuple(int(i) for i in hull),
        chart.center + middle_radius * loop,
        chart.center + chart.radius * loop,
    )


def build_refined_manifold(poly: SoiPolygon, max_spacing: float | None = None) -> tuple[GeodesicPath, ...]:
    verts = poly.vertices()
    n = len(verts)
    return tuple(geodesic_path(verts[i], verts[(i + 1) % n], max_spacing) for i in range(n))


def _segments(boundary) -> tuple[np.ndarray, np.ndarray]:
    chart = boundary[0].chart
    a = np.concatenate([p.samples[:-1] for p in boundary])
    b = np.concatenate([p.samples[1:] for p in boundary])
    return (a - chart.center) / chart.radius, (b - chart.center) / chart.radius


def find_perpendicular_points(boundary, p0: SpherePoint, o0: SpherePoint) -> tuple[SpherePoint, SpherePoint]:
    """Boundary crossings of the great circle through O0 perpendicular to P0->O0.

    P1 is the nearest crossing on the left of the oriented geodesic P0->O0 (seen
    from outside the sphere), P2 the nearest on the right.
    """
    chart = o0.chart
    o = o0.unit
    if geodesic_distance(p0, o0) <= 1e-12 * chart.radius:
        raise DegenerateFrameError("camera position coincides with the centroid")
    t = -unit_log(o, p0.unit)[0]
    t /= np.linalg.norm(t)
    left = np.cross(o, t)

    a, b = _segments(boundary)
    sa, sb = a @ t, b @ t
    hit = (sa * sb <= 0) & ~((sa == 0) & (sb == 0))
    a, b = a[hit], b[hit]
    normals = np.cross(a, b)
    x = np.cross(t, normals)
    xn = np.linalg.norm(x, axis=1)
    flat = xn < 1e-15
    x[flat] = a[flat]
    x[~flat] /= xn[~flat, None]
    flip = np.sum(x * (a + b), axis=1) < 0
    x[flip] *= -1.0
    x /= np.linalg.norm(x, axis=1, keepdims=True)

    s = np.arctan2(x @ left, x @ o)
    pos, neg = s > 0, s < 0
    if not pos.any() or not neg.any():
        raise MalformedBoundaryError("perpendicular circle does not cross the boundary on both sides of O0")
    p1 = x[pos][np.argmin(s[pos])]
    p2 = x[neg][np.argmax(s[neg])]
    return chart.from_unit(p1), chart.from_unit(p2)


def _clip_to_horizon(path: GeodesicPath) -> tuple[GeodesicPath, bool]:
    chart = path.chart
    if not chart.hemisphere:
        return path, False
    below = path.samples[:, 2] < chart.center[2]
    if not below.any():
        return path, False
    rel = path.samples - chart.center
    rel[below, 2] = 0.0
    rel /= np.linalg.norm(rel, axis=1, keepdims=True)
    return GeodesicPath(path.start, path.end, chart.center + chart.radius * rel, path.length), True


def build_davs(
    kps: SoiKeypointSet, p0: SpherePoint, chart: SphereChart, cfg: DavsConfig | None = None
) -> DavsManifold:
    cfg = cfg or DavsConfig()
    if p0.chart != chart:
        raise InvalidInputError("camera position is not on the camera chart")
    spacing = cfg.max_spacing(chart)
    poly = build_soi_polygon(kps, chart)
    boundary = build_refined_manifold(poly, spacing)
    prob = FrechetProblem.from_units(chart, poly.action_units)
    o0 = karcher_mean(prob, cfg.karcher_tol, cfg.karcher_max_iter)
    if not poly.contains(o0):
        raise MalformedBoundaryError("Karcher mean falls outside the SOI polygon")
    p1, p2 = find_perpendicular_points(boundary, p0, o0)
    clipped = False
    paths = []
    for a, b in ((p0, p1), (p1, p2), (p2, p0)):
        path, c = _clip_to_horizon(geodesic_path(a, b, spacing))
        paths.append(path)
        clipped |= c
    return DavsManifold(chart, p0, o0, p1, p2, tuple(paths), boundary, poly, clipped)


def tangent_frame(m: DavsManifold) -> TangentFrame:
    p = m.p0.unit
    logs = unit_log(p, np.stack([m.o0.unit, m.p1.unit, m.p2.unit]))
    lengths = np.linalg.norm(logs, axis=1)
    if np.any(lengths <= 1e-12):
        raise DegenerateFrameError("camera position coincides with a DAVS vertex")
    v0, v1, v2 = logs / lengths[:, None]
    theta1 = float(unit_angle(v0, v1))
    theta2 = float(unit_angle(v0, v2))
    return TangentFrame(m.p0, v0, v1, v2, theta1, theta2)


def sample_direction(frame: TangentFrame, omega: float, u: float) -> TangentVector:
    lo, hi = frame.cone(omega)
    alpha = lo + u * (hi - lo)
    return TangentVector(frame.base, frame.direction_at(alpha))


# --- invariant checks -------------------------------------------------------------


def distance_to_boundary(boundary, x: np.ndarray) -> float:
    """Angular distance (radians) from unit vector ``x`` to a chain of geodesic samples."""
    a, b = _segments(boundary)
    n = np.cross(a, b)
    nn = np.linalg.norm(n, axis=1)
    best = float(np.min(unit_angle(x, np.concatenate([a, b]))))
    ok = nn > 1e-15
    n = n[ok] / nn[ok, None]
    a, b = a[ok], b[ok]
    h = n @ x
    proj = x - h[:, None] * n
    within = (np.sum(np.cross(a, proj) * n, axis=1) >= 0) & (np.sum(np.cross(proj, b) * n, axis=1) >= 0)
    if within.any():
        best = min(best, float(np.min(np.abs(np.arcsin(np.clip(h[within], -1, 1))))))
    return best


def perpendicularity_residual(m: DavsManifold) -> float:
    """|<tangent of P1->P2, tangent of P0->O0>| at the crossing of the two geodesics."""
    n12 = np.cross(m.p1.unit, m.p2.unit)
    n0 = np.cross(m.p0.unit, m.o0.unit)
    n12 /= np.linalg.norm(n12)
    n0 /= np.linalg.norm(n0)
    x = np.cross(n12, n0)
    xn = np.linalg.norm(x)
    if xn < 1e-15:
        return 1.0
    x /= xn
    if x @ m.o0.unit < 0:
        x = -x
    t12 = np.cross(n12, x)
    t0 = np.cross(n0, x)
    return abs(float(t12 @ t0))


def manifold_issues(m: DavsManifold, tol: float = 1e-6) -> list[str]:
    """Invariant violations of a constructed manifold; empty when it is well formed."""
    chart = m.chart
    r = chart.radius
    issues = []
    ends = [(p.samples[0], p.samples[-1]) for p in m.paths]
    for k in range(3):
        if np.linalg.norm(ends[k][1] - ends[(k + 1) % 3][0]) > tol * r:
            issues.append(f"boundary path {k} does not meet path {(k + 1) % 3}")
    anchors = [(m.p0, 0, 0), (m.p1, 0, 1), (m.p1, 1, 0), (m.p2, 1, 1), (m.p2, 2, 0), (m.p0, 2, 1)]
    for pt, k, j in anchors:
        if np.linalg.norm(ends[k][j] - pt.position) > tol * r:
            issues.append(f"boundary path {k} endpoint {j} is not its vertex")
    for name, pt in (("P1", m.p1), ("P2", m.p2)):
        if distance_to_boundary(m.boundary, pt.unit) * r > tol * r:
            issues.append(f"{name} is off the refined boundary")
    if perpendicularity_residual(m) > tol:
        issues.append("P1-P2 geodesic is not perpendicular to P0-O0")
    if not m.polygon.contains(m.o0):
        issues.append("O0 lies outside the SOI polygon")
    for path in (*m.paths, *m.boundary):
        rel = np.linalg.norm(path.samples - chart.center, axis=1)
        if np.any(np.abs(rel - r) > 1e-9 * r):
            issues.append("boundary sample off the camera sphere")
            break
    return issues


# --- JSON documents ---------------------------------------------------------------


def _vec(x) -> list[float]:
    return [float(v) for v in x]


def chart_to_dict(chart: SphereChart) -> dict:
    return {"center": _vec(chart.center), "radius": chart.radius, "hemisphere": chart.hemisphere}


def chart_from_dict(doc: dict) -> SphereChart:
    return SphereChart(np.array(doc["center"], dtype=float), float(doc["radius"]), bool(doc.get("hemisphere", True)))


def keypoints_to_dict(kps: SoiKeypointSet) -> dict:
    return {"t": int(kps.t), "keypoints": [_vec(k) for k in kps.keypoints]}


def keypoints_from_dict(doc: dict) -> SoiKeypointSet:
    try:
        return SoiKeypointSet(np.array(doc["keypoints"], dtype=float), int(doc.get("t", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed keypoint document: {exc}") from exc


def _path_to_dict(path: GeodesicPath) -> dict:
    return {
        "start": _vec(path.start.position),
        "end": _vec(path.end.position),
        "length": float(path.length),
        "samples": [_vec(s) for s in path.samples],
    }


def _path_from_dict(doc: dict, chart: SphereChart) -> GeodesicPath:
    samples = np.array(doc["samples"], dtype=float).reshape(-1, 3)
    return GeodesicPath(chart.point(doc["start"]), chart.point(doc["end"]), samples, float(doc["length"]))


def manifold_to_dict(m: DavsManifold) -> dict:
    poly = m.polygon
    return {
        "chart": chart_to_dict(m.chart),
        "p0": _vec(m.p0.position),
        "o0": _vec(m.o0.position),
        "p1": _vec(m.p1.position),
        "p2": _vec(m.p2.position),
        "paths": [_path_to_dict(p) for p in m.paths],
        "boundary": [_path_to_dict(p) for p in m.boundary],
        "polygon": {
            "middle_radius": float(poly.middle_radius),
            "hull_indices": [int(i) for i in poly.hull_indices],
            "middle_points": [_vec(x) for x in poly.middle_points],
            "action_points": [_vec(x) for x in poly.action_points],
        },
        "clipped": bool(m.clipped),
    }


def manifold_from_dict(doc: dict) -> DavsManifold:
    try:
        chart = chart_from_dict(doc["chart"])
        pd = doc["polygon"]
        poly = SoiPolygon(
            chart,
            float(pd["middle_radius"]),
            tuple(int(i) for i in pd["hull_indices"]),
            np.array(pd["middle_points"], dtype=float).reshape(-1, 3),
            np.array(pd["action_points"], dtype=float).reshape(-1, 3),
        )
        paths = tuple(_path_from_dict(p, chart) for p in doc["paths"])
        if len(paths) != 3:
            raise InvalidInputError("a manifold document needs exactly three boundary paths")
        return DavsManifold(
            chart,
            chart.point(doc["p0"]),
            chart.point(doc["o0"]),
            chart.point(doc["p1"]),
            chart.point(doc["p2"]),
            paths,
            tuple(_path_from_dict(p, chart) for p in doc["boundary"]),
            poly,
            bool(doc.get("clipped", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed manifold document: {exc}") from exc
