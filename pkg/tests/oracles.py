"""Independent reference computations used by the tests.

Each routine takes a different numerical route from the package: arccos instead of
atan2 for angles, rotation matrices instead of the closed-form exponential, scipy's
planar hull instead of the monotone chain, and grid search plus Nelder-Mead instead
of the trust-region solver.
"""

import math

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def arc(p, q):
    """Angle between unit vectors through the clamped arccos."""
    return math.acos(max(-1.0, min(1.0, float(np.dot(p, q)))))


def chord_arc(p, q):
    """Angle between unit vectors from their chord; accurate near zero where arccos is not."""
    return 2.0 * math.asin(min(1.0, float(np.linalg.norm(np.subtract(p, q))) / 2.0))


def rotate_exp(p, v):
    """Exponential map on the unit sphere as a rotation about p x v."""
    t = float(np.linalg.norm(v))
    if t == 0.0:
        return np.array(p, dtype=float)
    axis = unit(np.cross(p, v))
    return Rotation.from_rotvec(axis * t).apply(p)


def projected_log(p, q):
    """Logarithm on the unit sphere via the normalized tangent projection."""
    w = np.asarray(q) - np.dot(p, q) * np.asarray(p)
    n = np.linalg.norm(w)
    if n == 0.0:
        return np.zeros(3)
    return w / n * arc(p, q)


def align_to_z(c):
    """Rotation that sends unit vector c to +z."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(c, z)
    s = np.linalg.norm(axis)
    if s < 1e-15:
        return Rotation.identity() if c[2] > 0 else Rotation.from_rotvec([math.pi, 0.0, 0.0])
    return Rotation.from_rotvec(axis / s * math.atan2(s, float(np.dot(c, z))))


def hull_oracle(units):
    """Hull vertex indices in counter-clockwise order seen from outside, via scipy."""
    units = np.asarray(units, dtype=float)
    c = unit(units.sum(axis=0))
    rot = align_to_z(c)
    local = rot.apply(units)
    xy = local[:, :2] / local[:, 2:3]
    return [int(i) for i in ConvexHull(xy).vertices]


def same_cycle(a, b):
    a, b = list(a), list(b)
    if len(a) != len(b) or set(a) != set(b):
        return False
    k = b.index(a[0])
    return b[k:] + b[:k] == a


def frechet_cost(x, units, weights):
    return float(sum(w * arc(x, u) ** 2 for u, w in zip(units, weights)))


def karcher_oracle(units, weights=None, coarse=0.01, fine=1e-3):
    """Grid search over a tangent-plane patch, then a 1e-3 rad grid, then Nelder-Mead."""
    units = np.asarray(units, dtype=float)
    weights = np.ones(len(units)) if weights is None else np.asarray(weights, dtype=float)
    c = unit(weights @ units)
    back = align_to_z(c).inv()
    z = np.array([0.0, 0.0, 1.0])

    def points(ab):
        ab = np.atleast_2d(ab)
        # exp at the pole along (a, b) is a rotation about z x (a, b, 0) = (-b, a, 0)
        rotvec = np.column_stack([-ab[:, 1], ab[:, 0], np.zeros(len(ab))])
        return back.apply(Rotation.from_rotvec(rotvec).apply(z))

    def costs(ab):
        ang = np.arccos(np.clip(points(ab) @ units.T, -1.0, 1.0))
        return (ang * ang) @ weights

    def grid(center, half, step):
        ticks = np.arange(-half, half + step / 2, step)
        a, b = np.meshgrid(center[0] + ticks, center[1] + ticks)
        ab = np.column_stack([a.ravel(), b.ravel()])
        return ab[np.argmin(costs(ab))]

    reach = max(arc(c, u) for u in units) + coarse
    ab = grid((0.0, 0.0), reach, coarse)
    ab = grid(ab, 2 * coarse, fine)
    res = minimize(lambda v: float(costs(v)[0]), ab, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    return points(res.x)[0]


def segment_hits_disk(a, b, center, radius, normal):
    """Plain-Python test of segment a-b against a disk."""
    n = unit(normal)
    da = float(np.dot(np.subtract(a, center), n))
    db = float(np.dot(np.subtract(b, center), n))
    if da * db >= 0:
        return False
    t = da / (da - db)
    x = np.asarray(a) + t * (np.asarray(b) - np.asarray(a))
    return float(np.linalg.norm(x - np.asarray(center))) <= radius


def ring_count_oracle(loop, cam, target, fov_deg, disk=None):
    gaze = unit(np.subtract(target, cam))
    count = 0
    for v in loop:
        ray = unit(np.subtract(v, cam))
        if math.degrees(arc(ray, gaze)) > fov_deg + 1e-12:
            continue
        if disk is not None and segment_hits_disk(cam, v, disk.center, disk.radius, disk.normal):
            continue
        count += 1
    return count


def random_cap_units(rng, n, center, spread):
    """n unit vectors scattered within roughly ``spread`` radians of ``center``."""
    rot = align_to_z(unit(center)).inv()
    out = []
    for _ in range(n):
        t = spread * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        out.append(rot.apply([math.sin(t) * math.cos(phi), math.sin(t) * math.sin(phi), math.cos(t)]))
    return np.array(out)


def seen_through_loop(cam, point, loop, normal):
    """Plain-Python check that segment cam->point pierces the loop polygon from its outer side."""
    center = np.mean(loop, axis=0)
    dc = float(np.dot(np.subtract(cam, center), normal))
    dp = float(np.dot(np.subtract(point, center), normal))
    if not (dc > 0 > dp):
        return False
    x = np.asarray(cam) + dc / (dc - dp) * (np.asarray(point) - np.asarray(cam))
    n = len(loop)
    for i in range(n):
        a, b = loop[i], loop[(i + 1) % n]
        if float(np.dot(np.cross(b - a, x - a), normal)) < 0:
            return False
    return True
