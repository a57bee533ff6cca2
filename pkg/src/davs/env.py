"""Kinematic stand-in for the cube-in-a-bag interactive perception tasks.

The bag opening is an ellipse stretched between a fixed handle and the end-effector.
Its minor axis (aperture) grows with handle separation and saturates; pulling past
the material limit overstretches the bag and ends the episode. The camera moves on
the viewpoint hemisphere by pitch/yaw and always looks at the viewpoint centroid.
The cube is visible only through the opening, and an optional disk occludes views.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError, InvalidTransitionError
from .sphere import SphereChart, SpherePoint, unit_exp

CUBE_SAMPLES = 128


def _norm3(v: np.ndarray) -> float:
    return math.sqrt(float(v @ v))


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross is slow for single 3-vectors on the per-step hot path
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple[float, float, float]
    radius: float
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class EnvConfig:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.6
    t_max: int = 200
    discount: float = 0.99
    lambda_rigid_ref: float = 100.0
    lambda_ring: float = 10.0
    tau_rigid: float = 0.5
    tau_ring: float = 0.8
    pitch_limits_deg: tuple[float, float] = (-89.0, -30.0)
    yaw_limits_deg: tuple[float, float] = (45.0, 135.0)
    fov_half_angle_deg: float = 20.0
    cam_max_step: float = 0.05  # radians per step
    ee_max_step: float = 0.01  # metres per step (norm)
    ee_box_min: tuple[float, float, float] = (0.02, 0.07, 0.18)
    ee_box_max: tuple[float, float, float] = (0.20, 0.19, 0.30)
    ee_birth_box_min: tuple[float, float, float] = (0.02, 0.10, 0.21)
    ee_birth_box_max: tuple[float, float, float] = (0.07, 0.16, 0.27)
    obstacle: ObstacleSpec | None = None
    handle: tuple[float, float, float] = (-0.07, 0.13, 0.24)
    rest_separation: float = 0.08
    open_separation: float = 0.16
    limit_separation: float = 0.22
    loop_vertices: int = 16
    max_aperture: float = 0.045
    tilt_gain: float = 0.5
    cube_half_extent: float = 0.025
    cube_offset_max: float = 0.02
    camera_birth: str = "fixed"
    ee_birth: str = "fixed"
    camera_fixed_deg: tuple[float, float] = (-35.0, 50.0)  # pitch, yaw
    ee_fixed: tuple[float, float, float] = (0.025, 0.13, 0.24)
    seed: int = 0

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError("t_max: must be at least 1")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount: must lie in [0, 1)")
        for key in ("tau_rigid", "tau_ring"):
            v = getattr(self, key)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{key}: must lie in (0, 1]")
        for key in ("pitch_limits_deg", "yaw_limits_deg"):
            lo, hi = getattr(self, key)
            if not lo <= hi:
                raise ConfigError(f"{key}: limits must be ordered")
        if self.loop_vertices < 8:
            raise ConfigError("loop_vertices: need at least 8")
        if not self.radius > 0:
            raise ConfigError("radius: must be positive")
        if not self.rest_separation < self.open_separation <= self.limit_separation:
            raise ConfigError("separations: need rest < open <= limit")
        if self.camera_birth not in ("fixed", "random"):
            raise ConfigError("camera_birth: must be 'fixed' or 'random'")
        if self.ee_birth not in ("fixed", "random"):
            raise ConfigError("ee_birth: must be 'fixed' or 'random'")
        if np.any(np.asarray(self.ee_box_min) > np.asarray(self.ee_box_max)):
            raise ConfigError("ee_box_min: must not exceed ee_box_max")

    @property
    def chart(self) -> SphereChart:
        return SphereChart(np.asarray(self.center, dtype=float), self.radius, hemisphere=True)

    @property
    def pitch_limits(self) -> tuple[float, float]:
        return tuple(math.radians(v) for v in self.pitch_limits_deg)

    @property
    def yaw_limits(self) -> tuple[float, float]:
        return tuple(math.radians(v) for v in self.yaw_limits_deg)

    def replace(self, **changes) -> "EnvConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


SCENARIOS = ("clean", "obstacle")


def scenario_config(name: str, **overrides) -> EnvConfig:
    if name == "clean":
        cfg = EnvConfig()
    elif name == "obstacle":
        cfg = EnvConfig(
            # disk hovering over the opening; the fixed camera starts in its shadow
            obstacle=ObstacleSpec(center=(0.01, 0.18, 0.43), radius=0.08, normal=(0.0, 0.25, 0.97)),
            camera_fixed_deg=(-73.0, 87.0),
        )
    else:
        raise ConfigError(f"scenario: unknown scenario {name!r}")
    return cfg.replace(**overrides) if overrides else cfg


def _coerce(name: str, value, default):
    if name == "obstacle":
        if value is None:
            return None
        if not isinstance(value, dict):
            raise ConfigError("obstacle: expected a mapping with center/radius[/normal]")
        known = {f.name for f in dataclasses.fields(ObstacleSpec)}
        for k in value:
            if k not in known:
                raise ConfigError(f"obstacle.{k}: unknown key")
        try:
            return ObstacleSpec(
                center=tuple(float(x) for x in value["center"]),
                radius=float(value["radius"]),
                normal=tuple(float(x) for x in value.get("normal", (0.0, 0.0, 1.0))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"obstacle: malformed value ({exc})") from exc
    try:
        if isinstance(default, tuple):
            out = tuple(float(x) for x in value)
            if len(out) != len(default):
                raise ValueError(f"expected {len(default)} numbers")
            return out
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: bad value {value!r} ({exc})") from exc
    return value


def config_from_mapping(data: dict, base: EnvConfig | None = None) -> EnvConfig:
    base = base or EnvConfig()
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(EnvConfig)}
    changes = {}
    for key, value in data.items():
        if key not in defaults:
            raise ConfigError(f"{key}: unknown config key")
        changes[key] = _coerce(key, value, defaults[key])
    return base.replace(**changes)


def load_config(path, base: EnvConfig | None = None) -> EnvConfig:
    """Read a YAML (or JSON) key-value file; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc})") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path} ({exc})") from exc
    return config_from_mapping(data, base)


# --- state -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BagShape:
    loop: np.ndarray  # (N, 3) opening vertices, counter-clockwise about ``normal``
    center: np.ndarray
    normal: np.ndarray
    separation: float
    aperture: float
    overstretched: bool


@dataclass(frozen=True, eq=False)
class EnvState:
    t: int
    pitch: float
    yaw: float
    ee: np.ndarray
    bag: BagShape
    cube_center: np.ndarray
    cube_half: float
    a_rigid: float
    n_ring: int
    done: bool = False
    done_reason: str | None = None

    @property
    def loop(self) -> np.ndarray:
        return self.bag.loop


@dataclass(frozen=True, eq=False)
class Observation:
    ee: np.ndarray
    keypoints: np.ndarray
    a_rigid: float
    n_ring: int
    pitch: float
    yaw: float
    camera: np.ndarray

    def to_record(self) -> dict:
        return {
            "ee": [float(x) for x in self.ee],
            "a_rigid": float(self.a_rigid),
            "n_ring": int(self.n_ring),
            "pitch": float(self.pitch),
            "yaw": float(self.yaw),
        }


@dataclass(frozen=True, eq=False)
class ActionPair:
    """Camera tangent direction + step (radians) and end-effector displacement (metres)."""

    cam_direction: np.ndarray
    cam_step: float
    ee_delta: np.ndarray

    @classmethod
    def zero(cls) -> "ActionPair":
        return cls(np.zeros(3), 0.0, np.zeros(3))


@dataclass(frozen=True, eq=False)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    done_reason: str | None
    state: EnvState


# --- geometry of the proxy ---------------------------------------------------------


def camera_unit(pitch: float, yaw: float) -> np.ndarray:
    el = -pitch
    ce = math.cos(el)
    return np.array([ce * math.cos(yaw), ce * math.sin(yaw), math.sin(el)])


def camera_position(cfg: EnvConfig, pitch: float, yaw: float) -> np.ndarray:
    return np.asarray(cfg.center, dtype=float) + cfg.radius * camera_unit(pitch, yaw)


def camera_point(cfg: EnvConfig, pitch: float, yaw: float) -> SpherePoint:
    return cfg.chart.from_unit(camera_unit(pitch, yaw))


def pitch_yaw_of(unit: np.ndarray) -> tuple[float, float]:
    el = math.asin(max(-1.0, min(1.0, float(unit[2]))))
    return -el, math.atan2(float(unit[1]), float(unit[0]))


def clamp_pose(cfg: EnvConfig, pitch: float, yaw: float) -> tuple[float, float]:
    plo, phi = cfg.pitch_limits
    ylo, yhi = cfg.yaw_limits
    return min(max(pitch, plo), phi), min(max(yaw, ylo), yhi)


def east_north(pitch: float, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Tangent directions of increasing yaw and increasing elevation at a camera pose."""
    el = -pitch
    east = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    north = np.array([-math.sin(el) * math.cos(yaw), -math.sin(el) * math.sin(yaw), math.cos(el)])
    return east, north


def aperture_of(separation: float, cfg: EnvConfig) -> float:
    s = (separation - cfg.rest_separation) / (cfg.open_separation - cfg.rest_separation)
    s = min(max(s, 0.0), 1.0)
    return cfg.max_aperture * s * s * (3.0 - 2.0 * s)


def bag_shape(ee, cfg: EnvConfig) -> BagShape:
    ee = np.asarray(ee, dtype=float)
    handle = np.asarray(cfg.handle, dtype=float)
    v0 = np.asarray(cfg.center, dtype=float)
    span = ee - handle
    separation = _norm3(span)
    mid = 0.5 * (ee + handle)
    e1 = span / separation if separation > 0 else np.array([1.0, 0.0, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    out = mid - v0
    out = out / _norm3(out) if _norm3(out) > 0 else up
    n = (1.0 - cfg.tilt_gain) * up + cfg.tilt_gain * out
    n = n - (n @ e1) * e1
    if _norm3(n) < 1e-12:
        n = up - (up @ e1) * e1
    n /= _norm3(n)
    e2 = _cross3(n, e1)
    aperture = aperture_of(separation, cfg)
    phi = 2 * np.pi * np.arange(cfg.loop_vertices) / cfg.loop_vertices
    loop = mid + np.outer(0.5 * separation * np.cos(phi), e1) + np.outer(aperture * np.sin(phi), e2)
    return BagShape(loop, mid, n, separation, aperture, separation >= cfg.limit_separation)


def bag_kinematics(state: EnvState, ee_displacement, cfg: EnvConfig) -> BagShape:
    lo, hi = np.asarray(cfg.ee_box_min), np.asarray(cfg.ee_box_max)
    ee = np.clip(state.ee + np.asarray(ee_displacement, dtype=float), lo, hi)
    return bag_shape(ee, cfg)


def _fibonacci_cube(count: int) -> np.ndarray:
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    d = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    d /= np.max(np.abs(d), axis=1, keepdims=True)
    d.setflags(write=False)
    return d


_CUBE_LATTICE = _fibonacci_cube(CUBE_SAMPLES)


def cube_samples(center, half: float) -> np.ndarray:
    """Deterministic stratified surface samples: a Fibonacci lattice pushed onto the cube."""
    return np.asarray(center, dtype=float) + half * _CUBE_LATTICE


def _in_fov(cfg: EnvConfig, cam: np.ndarray, pts: np.ndarray) -> np.ndarray:
    gaze = np.asarray(cfg.center, dtype=float) - cam
    gaze /= _norm3(gaze)
    rays = pts - cam
    cosang = (rays @ gaze) / np.linalg.norm(rays, axis=1)
    return cosang >= math.cos(math.radians(cfg.fov_half_angle_deg))


def disk_blocks(obstacle: ObstacleSpec | None, cam: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """True where the segment camera->point crosses the obstacle disk."""
    pts = np.atleast_2d(pts)
    if obstacle is None:
        return np.zeros(len(pts), dtype=bool)
    c = np.asarray(obstacle.center, dtype=float)
    n = np.asarray(obstacle.normal, dtype=float)
    n = n / _norm3(n)
    dc = (cam - c) @ n
    dp = (pts - c) @ n
    crosses = dc * dp < 0
    tau = np.divide(dc, dc - dp, out=np.zeros_like(dp), where=crosses)
    x = cam + tau[:, None] * (pts - cam)
    return crosses & (np.linalg.norm(x - c, axis=1) <= obstacle.radius)


def through_opening(bag: BagShape, cam: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """True where the segment camera->point enters the bag through the opening polygon."""
    if bag.aperture <= 0.0:
        return np.zeros(len(pts), dtype=bool)
    n = bag.normal
    dc = float((cam - bag.center) @ n)
    dp = (pts - bag.center) @ n
    crosses = (dc > 0) & (dp < 0)
    if not crosses.any():
        return crosses
    tau = dc / (dc - dp[crosses])
    x = cam + tau[:, None] * (pts[crosses] - cam)
    # point-in-convex-polygon in the opening plane
    e1 = bag.loop[0] - bag.center
    e1 /= _norm3(e1)
    e2 = _cross3(n, e1)
    basis = np.stack([e1, e2], axis=1)
    poly = (bag.loop - bag.center) @ basis
    q = (x - bag.center) @ basis
    edge = np.roll(poly, -1, axis=0) - poly
    rel_x = q[:, None, 0] - poly[None, :, 0]
    rel_y = q[:, None, 1] - poly[None, :, 1]
    inside = np.all(edge[None, :, 0] * rel_y - edge[None, :, 1] * rel_x >= 0, axis=1)
    out = np.zeros(len(pts), dtype=bool)
    out[np.flatnonzero(crosses)[inside]] = True
    return out


def visibility_rigid(state: EnvState, cfg: EnvConfig) -> float:
    cam = camera_position(cfg, state.pitch, state.yaw)
    pts = cube_samples(state.cube_center, state.cube_half)
    seen = through_opening(state.bag, cam, pts)
    if seen.any():
        seen &= _in_fov(cfg, cam, pts) & ~disk_blocks(cfg.obstacle, cam, pts)
    return float(np.count_nonzero(seen)) / len(pts)


def visible_ring_count(state: EnvState, cfg: EnvConfig, pitch: float | None = None, yaw: float | None = None) -> int:
    """Loop vertices inside the view cone and not behind the obstacle (optionally at a probe pose)."""
    pitch = state.pitch if pitch is None else pitch
    yaw = state.yaw if yaw is None else yaw
    return ring_count_from(state.bag.loop, cfg, pitch, yaw)


def ring_count_from(loop: np.ndarray, cfg: EnvConfig, pitch: float, yaw: float) -> int:
    cam = camera_position(cfg, pitch, yaw)
    seen = _in_fov(cfg, cam, loop) & ~disk_blocks(cfg.obstacle, cam, loop)
    return int(np.count_nonzero(seen))


def lambda_rigid(state: EnvState, cfg: EnvConfig) -> float:
    cam = camera_position(cfg, state.pitch, state.yaw)
    d = _norm3(cam - state.cube_center)
    return cfg.lambda_rigid_ref * (d / cfg.radius) ** 2


def is_success(state: EnvState, cfg: EnvConfig) -> bool:
    return (
        state.a_rigid >= cfg.tau_rigid
        and state.n_ring / cfg.loop_vertices >= cfg.tau_ring
        and state.t < cfg.t_max
    )


def reward(prev: EnvState, state: EnvState, t: int, cfg: EnvConfig, lam_r: float | None = None) -> float:
    """Visibility-gain shaping plus a time-scaled completion bonus.

    ``lam_r`` freezes the rigid-visibility weight; by default it follows the
    camera-to-cube distance of ``state``.
    """
    lam_r = lambda_rigid(state, cfg) if lam_r is None else lam_r
    d_rigid = state.a_rigid - prev.a_rigid
    d_ring = state.n_ring - prev.n_ring
    bonus = 0.0
    if state.a_rigid >= cfg.tau_rigid and state.n_ring / cfg.loop_vertices >= cfg.tau_ring and t < cfg.t_max:
        bonus = 100.0 * (cfg.t_max - t)
    return lam_r * d_rigid + cfg.lambda_ring * d_ring + bonus


def observe(state: EnvState, cfg: EnvConfig) -> Observation:
    return Observation(
        ee=state.ee.copy(),
        keypoints=state.bag.loop.copy(),
        a_rigid=state.a_rigid,
        n_ring=state.n_ring,
        pitch=state.pitch,
        yaw=state.yaw,
        camera=camera_position(cfg, state.pitch, state.yaw),
    )


def _sensed(state: EnvState, cfg: EnvConfig) -> EnvState:
    a = visibility_rigid(state, cfg)
    n = visible_ring_count(state, cfg)
    return dataclasses.replace(state, a_rigid=a, n_ring=n)


def reset(cfg: EnvConfig, seed: int | None = None) -> tuple[EnvState, Observation]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    # draw every variate regardless of birth mode so the cube does not depend on the mode
    cam_u = rng.random(2)
    ee_u = rng.random(3)
    cube_u = rng.random(2)

    plo, phi = cfg.pitch_limits
    ylo, yhi = cfg.yaw_limits
    if cfg.camera_birth == "random":
        pitch = plo + cam_u[0] * (phi - plo)
        yaw = ylo + cam_u[1] * (yhi - ylo)
    else:
        pitch, yaw = (math.radians(v) for v in cfg.camera_fixed_deg)
        if clamp_pose(cfg, pitch, yaw) != (pitch, yaw):
            raise ConfigError("camera_fixed_deg: fixed camera pose lies outside the pitch/yaw limits")

    lo, hi = np.asarray(cfg.ee_box_min), np.asarray(cfg.ee_box_max)
    if cfg.ee_birth == "random":
        blo, bhi = np.asarray(cfg.ee_birth_box_min), np.asarray(cfg.ee_birth_box_max)
        ee = blo + ee_u * (bhi - blo)
        if np.any(ee < lo) or np.any(ee > hi):
            raise ConfigError("ee_birth_box_min: birth box must lie inside the end-effector box")
    else:
        ee = np.asarray(cfg.ee_fixed, dtype=float)
        if np.any(ee < lo) or np.any(ee > hi):
            raise ConfigError("ee_fixed: fixed end-effector pose lies outside the box")

    bag = bag_shape(ee, cfg)
    if bag.overstretched:
        raise ConfigError("ee_fixed: end-effector birth pose overstretches the bag")
    h = cfg.cube_half_extent
    off = (2.0 * cube_u - 1.0) * cfg.cube_offset_max
    cube = np.asarray(cfg.center, dtype=float) + np.array([off[0], off[1], h])
    state = EnvState(0, pitch, yaw, ee, bag, cube, h, 0.0, 0)
    state = _sensed(state, cfg)
    return state, observe(state, cfg)


def apply_camera(cfg: EnvConfig, pitch: float, yaw: float, direction, step: float) -> tuple[float, float]:
    step = min(max(float(step), 0.0), cfg.cam_max_step)
    p = camera_unit(pitch, yaw)
    d = np.asarray(direction, dtype=float)
    d = d - (d @ p) * p
    dn = _norm3(d)
    if step == 0.0 or dn == 0.0:
        return pitch, yaw
    q = unit_exp(p, d * (step / dn))
    return clamp_pose(cfg, *pitch_yaw_of(q))


def step(state: EnvState, action: ActionPair, cfg: EnvConfig) -> StepResult:
    if state.done:
        raise InvalidTransitionError("episode already terminated")
    pitch, yaw = apply_camera(cfg, state.pitch, state.yaw, action.cam_direction, action.cam_step)
    delta = np.asarray(action.ee_delta, dtype=float)
    dn = _norm3(delta)
    if dn > cfg.ee_max_step:
        delta = delta * (cfg.ee_max_step / dn)
    lo, hi = np.asarray(cfg.ee_box_min), np.asarray(cfg.ee_box_max)
    ee = np.clip(state.ee + delta, lo, hi)
    bag = state.bag if np.array_equal(ee, state.ee) else bag_shape(ee, cfg)
    t = state.t + 1
    nxt = _sensed(dataclasses.replace(state, t=t, pitch=pitch, yaw=yaw, ee=ee, bag=bag), cfg)
    r = reward(state, nxt, t, cfg)
    if is_success(nxt, cfg):
        reason = "success"
    elif bag.overstretched:
        reason = "overstretch"
    elif t >= cfg.t_max:
        reason = "timeout"
    else:
        reason = None
    nxt = dataclasses.replace(nxt, done=reason is not None, done_reason=reason)
    return StepResult(observe(nxt, cfg), r, nxt.done, reason, nxt)


class IPEnv:
    """Stateful wrapper around :func:`reset` / :func:`step` for rollout code."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.state: EnvState | None = None

    @property
    def chart(self) -> SphereChart:
        return self.cfg.chart

    def reset(self, seed: int | None = None) -> Observation:
        self.state, obs = reset(self.cfg, seed)
        return obs

    def step(self, action: ActionPair) -> StepResult:
        if self.state is None:
            raise InvalidTransitionError("reset() must be called before step()")
        res = step(self.state, action, self.cfg)
        self.state = res.state
        return res

    def camera_point(self) -> SpherePoint:
        return camera_point(self.cfg, self.state.pitch, self.state.yaw)


# --- episode logs -------------------------------------------------------------------


def step_record(res: StepResult) -> dict:
    s = res.state
    return {
        "t": s.t,
        "pitch": float(f"{s.pitch:.9g}"),
        "yaw": float(f"{s.yaw:.9g}"),
        "ee": [float(x) for x in s.ee],
        "a_rigid": float(s.a_rigid),
        "n_ring": int(s.n_ring),
        "reward": float(res.reward),
        "done": bool(res.done),
        "done_reason": res.done_reason,
    }


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
