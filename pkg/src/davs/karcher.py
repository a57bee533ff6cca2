"""Karcher (Frechet) mean on the action sphere by a Riemannian trust-region method.

The cost is the weighted sum of squared geodesic distances to the anchors. Each
iteration minimises the second-order model

    m(eta) = f(p) + <grad f(p), eta> + 1/2 <Hess f(p)[eta], eta>,   |eta| <= delta

on the 2-D tangent plane at ``p`` and maps the step back with the exponential map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidInputError, NonConvergenceError, NumericalFailureError
from .sphere import (
    SphereChart,
    SpherePoint,
    TangentVector,
    hemisphere_center,
    tangent_basis,
    unit_angle,
    unit_exp,
    unit_log,
)

ACCEPT_RATIO = 0.1
SHRINK_RATIO = 0.25
EXPAND_RATIO = 0.75
INITIAL_RADIUS = 0.1  # radians
MAX_RADIUS = math.pi / 4  # radians


@dataclass(frozen=True, eq=False)
class FrechetProblem:
    chart: SphereChart
    units: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_points(cls, anchors: Sequence[SpherePoint], weights=None) -> "FrechetProblem":
        if len(anchors) < 1:
            raise InvalidInputError("need at least one anchor")
        chart = anchors[0].chart
        if any(a.chart != chart for a in anchors):
            raise InvalidInputError("anchors belong to different charts")
        return cls.from_units(chart, np.array([a.unit for a in anchors]), weights)

    @classmethod
    def from_units(cls, chart: SphereChart, units, weights=None) -> "FrechetProblem":
        units = np.atleast_2d(np.asarray(units, dtype=float))
        if weights is None:
            weights = np.ones(len(units))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(units),) or np.any(weights < 0) or weights.sum() <= 0:
            raise InvalidInputError("weights must be non-negative, one per anchor, not all zero")
        hemisphere_center(units)
        return cls(chart, units, weights)

    @property
    def anchors(self) -> list[SpherePoint]:
        return [self.chart.from_unit(u) for u in self.units]

    def initial_guess(self) -> np.ndarray:
        s = self.weights @ self.units
        return s / np.linalg.norm(s)


@dataclass(frozen=True)
class TrustRegionState:
    point: SpherePoint
    radius: float  # world units (radians * r)
    iteration: int = 0
    ratio: float = float("nan")
    accepted: bool = False
    step_norm: float = 0.0


@dataclass
class KarcherResult:
    point: SpherePoint
    iterations: int
    grad_norm: float
    converged: bool
    variances: list[float] = field(default_factory=list)  # value after every accepted step, starting at the initial guess


def _check_point(p: SpherePoint, prob: FrechetProblem) -> None:
    if p.chart != prob.chart:
        raise InvalidInputError("point and problem use different charts")


def _variance_wide(p: np.ndarray, prob: FrechetProblem) -> np.longdouble:
    """Variance in extended precision.

    Near the minimum one step lowers the cost by less than a double ulp; the wider
    type resolves that decrease so accepted steps never raise the recorded value.
    """
    p = np.asarray(p, dtype=np.longdouble)
    x = prob.units.astype(np.longdouble)
    chord = np.sqrt(((x - p) ** 2).sum(axis=1))
    span = np.sqrt(((x + p) ** 2).sum(axis=1))
    theta = 2 * np.arctan2(chord, span)
    r = np.longdouble(prob.chart.radius)
    return r * r * (prob.weights.astype(np.longdouble) * theta * theta).sum()


def _variance_unit(p: np.ndarray, prob: FrechetProblem) -> float:
    return float(_variance_wide(p, prob))


def _gradient_unit(p: np.ndarray, prob: FrechetProblem) -> np.ndarray:
    # world-unit gradient: -2 sum w log_p(x)
    return -2.0 * prob.chart.radius * (prob.weights @ unit_log(p, prob.units))


def _curvature_terms(p: np.ndarray, prob: FrechetProblem):
    logs = unit_log(p, prob.units)
    theta = np.linalg.norm(logs, axis=1)
    safe = theta > 1e-12
    u = np.zeros_like(logs)
    u[safe] = logs[safe] / theta[safe, None]
    c = np.ones_like(theta)
    c[safe] = theta[safe] / np.tan(theta[safe])
    return logs, u, c


def _hessian_unit(p: np.ndarray, prob: FrechetProblem, eta: np.ndarray) -> np.ndarray:
    # per anchor: 2 w [ eta_par + theta cot(theta) eta_perp ], eta_par along log_p(x)
    _, u, c = _curvature_terms(p, prob)
    along = u @ eta
    par = along[:, None] * u
    terms = par + c[:, None] * (eta - par)
    return 2.0 * (prob.weights @ terms)


def _model(p: np.ndarray, prob: FrechetProblem, basis: np.ndarray):
    """Gradient (3-D, world units) and 2x2 Hessian in ``basis`` at unit point ``p``."""
    logs, u, c = _curvature_terms(p, prob)
    w = prob.weights
    g3 = -2.0 * prob.chart.radius * (w @ logs)
    u2 = u @ basis.T
    H = 2.0 * (np.einsum("i,ij,ik->jk", w * (1.0 - c), u2, u2) + float(w @ c) * np.eye(2))
    return g3, H


def frechet_variance(p: SpherePoint, prob: FrechetProblem) -> float:
    _check_point(p, prob)
    return _variance_unit(p.unit, prob)


def riemannian_gradient(p: SpherePoint, prob: FrechetProblem) -> TangentVector:
    _check_point(p, prob)
    return TangentVector(p, _gradient_unit(p.unit, prob))


def hessian_apply(p: SpherePoint, prob: FrechetProblem, eta: TangentVector) -> TangentVector:
    _check_point(p, prob)
    if eta.base.chart != p.chart or np.linalg.norm(eta.base.position - p.position) > 1e-9 * p.chart.radius:
        raise InvalidInputError("tangent vector is not based at p")
    return TangentVector(p, _hessian_unit(p.unit, prob, eta.direction))


def _boundary_solution(g: np.ndarray, H: np.ndarray, delta: float) -> np.ndarray:
    """Global minimiser of g.x + x.Hx/2 on |x| = delta via the secular equation."""
    lam, Q = np.linalg.eigh(H)
    gt = Q.T @ g
    # solve for the shift s = mu - max(0, -lam_min); near the hard case s is tiny and mu itself
    # could not resolve it
    shifted = lam + max(0.0, -lam[0])
    shifted[0] = max(shifted[0], 0.0)
    eps = 1e-12 * max(abs(lam[0]), abs(lam[1]), math.hypot(*g) / delta)

    def excess(s):
        return math.hypot(*(gt / (shifted + s))) - delta

    if eps == 0.0 or excess(eps) <= 0:
        # hard case: the secular curve never reaches delta, so pad along the lowest eigenvector
        y = np.zeros(2)
        ok = shifted > eps
        y[ok] = -gt[ok] / shifted[ok]
        rest = max(delta * delta - float(y @ y), 0.0)
        y[0] += math.copysign(math.sqrt(rest), -gt[0]) if gt[0] != 0 else math.sqrt(rest)
        return Q @ y
    b = max(2.0 * math.hypot(*g) / delta, 2.0 * eps)  # excess(b) <= -delta/2: shifted eigenvalues are >= 0
    s = brentq(excess, eps, b, xtol=1e-15 * b, rtol=4 * np.finfo(float).eps, maxiter=200)
    return Q @ (-gt / (shifted + s))


def solve_subproblem(g: np.ndarray, H: np.ndarray, delta: float) -> np.ndarray:
    """Steihaug truncated CG in 2-D; exact boundary solve when CG leaves the region."""
    gnorm = math.hypot(*g)  # scaled, so tiny gradients do not underflow to zero
    if gnorm == 0.0:
        return np.zeros(2)
    if np.linalg.eigvalsh(H)[0] <= 0.0:
        # without positive curvature the global minimiser lies on the boundary
        return _boundary_solution(g, H, delta)
    # CG is linear in g, so iterate on the unit gradient to keep products out of the subnormal range
    radius = delta / gnorm
    z = np.zeros(2)
    r = g / gnorm
    d = -r
    for _ in range(2):
        dHd = float(d @ H @ d)
        if dHd <= 0:
            return _boundary_solution(g, H, delta)
        alpha = float(r @ r) / dHd
        z_next = z + alpha * d
        if np.linalg.norm(z_next) >= radius:
            return _boundary_solution(g, H, delta)
        r_next = r + alpha * (H @ d)
        if np.linalg.norm(r_next) <= 1e-14:
            return z_next * gnorm
        beta = float(r_next @ r_next) / float(r @ r)
        d = -r_next + beta * d
        z, r = z_next, r_next
    return z * gnorm


def trust_region_step(
    state: TrustRegionState, prob: FrechetProblem, max_radius: float | None = None
) -> TrustRegionState:
    chart = prob.chart
    if max_radius is None:
        max_radius = MAX_RADIUS * chart.radius
    p = state.point.unit
    e1, e2 = tangent_basis(p)
    basis = np.stack([e1, e2])
    g3, H = _model(p, prob, basis)
    if not (np.all(np.isfinite(g3)) and np.all(np.isfinite(H))):
        raise NumericalFailureError("non-finite gradient or Hessian")
    if np.linalg.norm(g3) == 0.0:
        return replace(state, iteration=state.iteration + 1, ratio=float("nan"), accepted=False, step_norm=0.0)
    g = basis @ g3

    eta = solve_subproblem(g, H, state.radius)
    eta_norm = float(np.linalg.norm(eta))
    if eta_norm > state.radius:
        eta *= state.radius / eta_norm
        eta_norm = state.radius
    predicted = -float(g @ eta + 0.5 * eta @ H @ eta)
    f0 = _variance_wide(p, prob)
    # evaluate at the stored point so the recorded variance is exactly the one compared here
    candidate = chart.from_unit(unit_exp(p, (eta @ basis) / chart.radius))
    q = candidate.unit
    f1 = _variance_wide(q, prob)
    if not (math.isfinite(predicted) and np.isfinite(f1)):
        raise NumericalFailureError("non-finite model or cost value")
    actual = float(f0 - f1)

    rounding = float(64 * np.finfo(np.longdouble).eps * max(f0, np.longdouble(1e-300)))
    if predicted <= rounding:
        # cost differences are below resolution here; judge the step by the gradient instead
        better = np.linalg.norm(_gradient_unit(q, prob)) < np.linalg.norm(g3)
        ratio = 1.0 if better and actual >= 0.0 else 0.0
    else:
        ratio = actual / predicted

    radius = state.radius
    if ratio < SHRINK_RATIO:
        radius = radius / 4
    elif ratio > EXPAND_RATIO and eta_norm >= 0.999 * state.radius:
        radius = min(2 * radius, max_radius)

    accepted = ratio > ACCEPT_RATIO and actual >= 0
    point = candidate if accepted else state.point
    return TrustRegionState(point, radius, state.iteration + 1, ratio, accepted, eta_norm)


def solve_karcher(
    prob: FrechetProblem,
    tol: float = 1e-9,
    max_iter: int = 100,
    start: SpherePoint | None = None,
) -> KarcherResult:
    chart = prob.chart
    bound = tol * 2.0 * float(prob.weights.sum()) * chart.radius
    point = start if start is not None else chart.from_unit(prob.initial_guess())
    state = TrustRegionState(point, INITIAL_RADIUS * chart.radius)
    variances = [_variance_unit(point.unit, prob)]
    gnorm = float(np.linalg.norm(_gradient_unit(point.unit, prob)))
    while gnorm > bound and state.iteration < max_iter:
        state = trust_region_step(state, prob)
        if state.accepted:
            variances.append(_variance_unit(state.point.unit, prob))
            gnorm = float(np.linalg.norm(_gradient_unit(state.point.unit, prob)))
        elif state.radius < 1e-15 * chart.radius:
            break
    if gnorm > 10 * bound:
        raise NonConvergenceError(
            f"gradient norm {gnorm:.3e} above {10 * bound:.3e} after {state.iteration} iterations",
            last_iterate=state.point,
        )
    return KarcherResult(state.point, state.iteration, gnorm, gnorm <= bound, variances)


def karcher_mean(prob: FrechetProblem, tol: float = 1e-9, max_iter: int = 100) -> SpherePoint:
    return solve_karcher(prob, tol, max_iter).point
