"""Action exploration with a DAVS-constrained camera, comparison controllers, and CEM policy search.

A policy maps a small observation feature vector to three squashed Gaussian heads:
a cone coordinate ``u`` in [0, 1] for the camera direction, a camera step in
[0, cam_max_step] and an end-effector displacement. Under DAVS the direction is
drawn from the omega-cone of the per-step tangent frame; without DAVS ``u`` is
read as a heading over the full tangent circle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .env import (
    ActionPair,
    EnvConfig,
    IPEnv,
    Observation,
    StepResult,
    apply_camera,
    east_north,
    ring_count_from,
    step_record,
)
from .errors import DavsError, InvalidInputError, NumericalFailureError
from .manifold import SoiKeypointSet, build_davs, sample_direction, tangent_frame
from .sphere import unit_log

log = logging.getLogger(__name__)

FEATURES = ("pitch", "yaw", "ee_x", "ee_y", "ee_z", "a_rigid", "ring_frac", "bearing_cos", "bearing_sin", "bias")
HEADS = ("direction", "step", "ee_x", "ee_y", "ee_z")
METHODS = ("davs", "no-davs", "vs", "static")
LEARNED = ("davs", "no-davs", "static")
VS_PROBES = 8
CONE_TOL = 1e-9


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def features(obs: Observation, cfg: EnvConfig) -> np.ndarray:
    lo, hi = np.asarray(cfg.ee_box_min), np.asarray(cfg.ee_box_max)
    ee = (obs.ee - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
    # bearing of the keypoint centroid seen from the camera, in the east/north frame
    p = (obs.camera - np.asarray(cfg.center)) / cfg.radius
    c = obs.keypoints.mean(axis=0) - np.asarray(cfg.center)
    bc = bs = 0.0
    cn = float(np.linalg.norm(c))
    if cn > 0:
        v = unit_log(p, c / cn)[0]
        east, north = east_north(obs.pitch, obs.yaw)
        b = math.hypot(float(v @ east), float(v @ north))
        if b > 1e-12:
            bc, bs = float(v @ east) / b, float(v @ north) / b
    ring = obs.n_ring / len(obs.keypoints)
    return np.array([obs.pitch, obs.yaw, *ee, obs.a_rigid, ring, bc, bs, 1.0])


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray  # (len(HEADS), len(FEATURES))
    log_std: np.ndarray  # (len(HEADS),)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(len(HEADS), len(FEATURES))
        s = np.asarray(self.log_std, dtype=float).reshape(len(HEADS))
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(s))):
            raise InvalidInputError("policy parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "log_std", s)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls(np.zeros((len(HEADS), len(FEATURES))), np.zeros(len(HEADS)))

    @classmethod
    def size(cls) -> int:
        return len(HEADS) * (len(FEATURES) + 1)

    @classmethod
    def from_flat(cls, vec) -> "PolicyParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (cls.size(),):
            raise InvalidInputError(f"expected {cls.size()} parameters, got shape {vec.shape}")
        k = len(HEADS) * len(FEATURES)
        return cls(vec[:k], np.clip(vec[k:], -5.0, 2.0))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.log_std])

    def to_dict(self, config_hash: str = "") -> dict:
        return {
            "features": list(FEATURES),
            "heads": list(HEADS),
            "weights": self.weights.tolist(),
            "log_std": self.log_std.tolist(),
            "config_hash": config_hash,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyParams":
        if list(doc.get("features", FEATURES)) != list(FEATURES) or list(doc.get("heads", HEADS)) != list(HEADS):
            raise InvalidInputError("parameter file was written for a different feature or head layout")
        return cls(np.array(doc["weights"], dtype=float), np.array(doc["log_std"], dtype=float))


@dataclass(frozen=True)
class PolicyOutput:
    u: float
    step: float
    ee_delta: np.ndarray


def sample_policy(params: PolicyParams, obs: Observation, cfg: EnvConfig, rng: np.random.Generator) -> PolicyOutput:
    z = params.weights @ features(obs, cfg) + np.exp(params.log_std) * rng.standard_normal(len(HEADS))
    # the Gaussian CDF makes an untrained direction head (zero mean, unit spread) uniform
    u = float(ndtr(z[0]))
    step = cfg.cam_max_step * float(_sigmoid(z[1]))
    ee = cfg.ee_max_step * np.tanh(z[2:])
    return PolicyOutput(u, step, ee)


def heading_direction(obs: Observation, u: float) -> np.ndarray:
    """Tangent direction at angle 2*pi*u from east toward north."""
    east, north = east_north(obs.pitch, obs.yaw)
    a = 2.0 * math.pi * u
    return math.cos(a) * east + math.sin(a) * north


# --- rollouts ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConeRecord:
    """Enough of the step's tangent frame to re-check a camera direction offline."""

    v2: np.ndarray
    normal: np.ndarray
    lo: float
    hi: float

    def angle_of(self, direction) -> float:
        d = np.asarray(direction, dtype=float)
        left = np.cross(self.normal, self.v2)
        return math.atan2(float(d @ left), float(d @ self.v2)) % (2 * math.pi)

    def contains(self, direction, tol: float = CONE_TOL) -> bool:
        a = self.angle_of(direction)
        if self.lo - tol <= a <= self.hi + tol:
            return True
        # directions at the zero axis can come back as 2*pi - eps
        return self.lo - tol <= a - 2 * math.pi <= self.hi + tol

    def to_dict(self) -> dict:
        return {"v2": self.v2.tolist(), "normal": self.normal.tolist(), "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True, eq=False)
class Transition:
    prev: Observation
    action: ActionPair
    obs: Observation
    reward: float
    cone: ConeRecord | None = None
    fallback: bool = False


@dataclass(eq=False)
class RolloutRecord:
    method: str
    seed: int
    omega: float | None
    discount: float
    transitions: list[Transition]
    steps: list[dict]
    done_reason: str | None

    @property
    def length(self) -> int:
        return len(self.transitions)

    @property
    def success(self) -> bool:
        return self.done_reason == "success"

    @property
    def rewards(self) -> list[float]:
        return [tr.reward for tr in self.transitions]

    @property
    def discounted_return(self) -> float:
        return discounted_sum(self.rewards, self.discount)

    @property
    def fallback_steps(self) -> int:
        return sum(tr.fallback for tr in self.transitions)


def discounted_sum(rewards: Sequence[float], discount: float) -> float:
    total = 0.0
    w = 1.0
    for r in rewards:
        total += w * r
        w *= discount
    return total


def _run(env: IPEnv, seed: int, choose: Callable[[Observation], tuple[ActionPair, ConeRecord | None, bool]],
         method: str, omega: float | None) -> RolloutRecord:
    obs = env.reset(seed)
    transitions: list[Transition] = []
    steps: list[dict] = []
    while True:
        action, cone, fallback = choose(obs)
        res: StepResult = env.step(action)
        transitions.append(Transition(obs, action, res.observation, res.reward, cone, fallback))
        steps.append(step_record(res))
        obs = res.observation
        if res.done:
            return RolloutRecord(method, seed, omega, env.cfg.discount, transitions, steps, res.done_reason)


def _noise(seed: int) -> np.random.Generator:
    # policy noise is independent of the environment's own seeded stream
    return np.random.default_rng([int(seed), 7919])


def davs_rollout(env: IPEnv, params: PolicyParams, omega: float, seed: int) -> RolloutRecord:
    if not 0.0 <= omega <= 1.0:
        raise InvalidInputError(f"omega must lie in [0, 1], got {omega}")
    cfg = env.cfg
    rng = _noise(seed)

    def choose(obs):
        out = sample_policy(params, obs, cfg, rng)
        try:
            m = build_davs(SoiKeypointSet(obs.keypoints, env.state.t), env.camera_point(), cfg.chart)
            frame = tangent_frame(m)
        except DavsError as exc:
            log.debug("t=%d: DAVS unavailable (%s); sampling the full circle", env.state.t, exc)
            return ActionPair(heading_direction(obs, out.u), out.step, out.ee_delta), None, True
        lo, hi = frame.cone(omega)
        d = sample_direction(frame, omega, out.u).direction
        return ActionPair(d, out.step, out.ee_delta), ConeRecord(frame.v2, frame.normal, lo, hi), False

    return _run(env, seed, choose, "davs", omega)


def unconstrained_rollout(env: IPEnv, params: PolicyParams, seed: int) -> RolloutRecord:
    cfg = env.cfg
    rng = _noise(seed)

    def choose(obs):
        out = sample_policy(params, obs, cfg, rng)
        return ActionPair(heading_direction(obs, out.u), out.step, out.ee_delta), None, False

    return _run(env, seed, choose, "no-davs", None)


def static_vision_rollout(env: IPEnv, params: PolicyParams, seed: int) -> RolloutRecord:
    cfg = env.cfg
    rng = _noise(seed)

    def choose(obs):
        out = sample_policy(params, obs, cfg, rng)
        return ActionPair(np.zeros(3), 0.0, out.ee_delta), None, False

    return _run(env, seed, choose, "static", None)


def visual_servoing_policy(obs: Observation, cfg: EnvConfig) -> ActionPair:
    """Greedy ring-visibility ascent for the camera; open the bag at a fixed rate."""
    best, best_dir = ring_count_from(obs.keypoints, cfg, obs.pitch, obs.yaw), None
    for k in range(VS_PROBES):
        d = heading_direction(obs, k / VS_PROBES)
        n = ring_count_from(obs.keypoints, cfg, *apply_camera(cfg, obs.pitch, obs.yaw, d, cfg.cam_max_step))
        if n > best:
            best, best_dir = n, d
    handle = np.asarray(cfg.handle, dtype=float)
    out = obs.ee - handle
    sep = float(np.linalg.norm(out))
    ee = np.zeros(3)
    if sep < cfg.open_separation:
        ee = out / sep * min(cfg.ee_max_step, cfg.open_separation - sep)
    if best_dir is None:
        return ActionPair(np.zeros(3), 0.0, ee)
    return ActionPair(best_dir, cfg.cam_max_step, ee)


def vs_rollout(env: IPEnv, seed: int) -> RolloutRecord:
    return _run(env, seed, lambda obs: (visual_servoing_policy(obs, env.cfg), None, False), "vs", None)


def rollout(cfg: EnvConfig, method: str, params: PolicyParams | None, seed: int, omega: float = 1.0) -> RolloutRecord:
    """Run one episode of ``method`` on a fresh environment."""
    env = IPEnv(cfg)
    if method == "vs":
        return vs_rollout(env, seed)
    params = params if params is not None else PolicyParams.zeros()
    if method == "davs":
        return davs_rollout(env, params, omega, seed)
    if method == "no-davs":
        return unconstrained_rollout(env, params, seed)
    if method == "static":
        return static_vision_rollout(env, params, seed)
    raise InvalidInputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def _rollout_job(args) -> RolloutRecord:
    return rollout(*args)


def run_many(cfg: EnvConfig, method: str, params: PolicyParams | None, seeds: Sequence[int],
             omega: float = 1.0, jobs: int = 1) -> list[RolloutRecord]:
    args = [(cfg, method, params, int(s), omega) for s in seeds]
    if jobs <= 1 or len(args) <= 1:
        return [_rollout_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_rollout_job, args))


# --- constraint replay ---------------------------------------------------------------


@dataclass
class ConstraintReport:
    steps: int = 0
    inside: int = 0
    fallback: int = 0
    violations: list[tuple[int, int]] = field(default_factory=list)  # (seed, t)

    @property
    def checked(self) -> int:
        return self.steps - self.fallback

    @property
    def inside_pct(self) -> float:
        return 100.0 * self.inside / self.checked if self.checked else 100.0

    @property
    def fallback_pct(self) -> float:
        return 100.0 * self.fallback / self.steps if self.steps else 0.0


def validate_constraints(records: Sequence[RolloutRecord], tol: float = CONE_TOL) -> ConstraintReport:
    """Re-check every logged DAVS camera direction against its step's omega-cone."""
    rep = ConstraintReport()
    for rec in records:
        for t, tr in enumerate(rec.transitions):
            rep.steps += 1
            if tr.fallback:
                rep.fallback += 1
            elif tr.cone is not None and tr.cone.contains(tr.action.cam_direction, tol):
                rep.inside += 1
            else:
                rep.violations.append((rec.seed, t))
    return rep


# --- metrics -------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    episodes: int
    mean_len: float
    median_len: float
    mean_reward: float
    success_pct: float


def summarize(records: Sequence[RolloutRecord]) -> Metrics:
    if not records:
        raise InvalidInputError("no episodes to summarize")
    lens = [r.length for r in records]
    return Metrics(
        len(records),
        float(np.mean(lens)),
        float(statistics.median(lens)),
        float(np.mean([r.discounted_return for r in records])),
        100.0 * sum(r.success for r in records) / len(records),
    )


def summarize_logs(logs: Sequence[Sequence[dict]], discount: float) -> Metrics:
    """Metrics recomputed from stored per-step JSONL records."""
    lens = [len(steps) for steps in logs]
    rets = [discounted_sum([s["reward"] for s in steps], discount) for steps in logs]
    succ = [bool(steps) and steps[-1]["done_reason"] == "success" for steps in logs]
    return Metrics(len(logs), float(np.mean(lens)), float(statistics.median(lens)), float(np.mean(rets)),
                   100.0 * sum(succ) / len(logs))


def evaluate(params: PolicyParams | None, cfg: EnvConfig, method: str, n_episodes: int,
             seeds: Sequence[int] | None = None, omega: float = 1.0, jobs: int = 1):
    """Run ``n_episodes`` seeded episodes; returns (Metrics, records)."""
    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be at least 1")
    seeds = list(seeds) if seeds is not None else list(range(n_episodes))
    if len(seeds) < n_episodes:
        raise InvalidInputError(f"need {n_episodes} seeds, got {len(seeds)}")
    records = run_many(cfg, method, params, seeds[:n_episodes], omega, jobs)
    return summarize(records), records


def birth_mode(cfg: EnvConfig) -> str:
    return f"{cfg.camera_birth}/{cfg.ee_birth}"


def method_label(method: str, omega: float | None = None) -> str:
    return f"davs(omega={omega:g})" if method == "davs" and omega is not None else method


EVAL_COLUMNS = ("method", "scenario", "birth_mode", "mean_len", "mean_reward", "success_pct")
CURVE_COLUMNS = ("iteration", "scenario", "birth_mode", "mean_len", "mean_reward", "success_pct")


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# --- cross-entropy method ------------------------------------------------------------


@dataclass(frozen=True)
class CemConfig:
    population: int = 32
    elite: int = 8
    iterations: int = 60
    init_std: float = 0.5
    extra_std: float = 0.05  # added to the refit spread, decays linearly to zero
    episodes_per_candidate: int = 1
    eval_episodes: int = 8
    finalists: int = 3

    def __post_init__(self):
        if not (1 <= self.elite <= self.population):
            raise InvalidInputError("elite count must lie in [1, population]")
        if self.iterations < 1 or self.episodes_per_candidate < 1 or self.eval_episodes < 1:
            raise InvalidInputError("iterations and episode counts must be positive")


@dataclass
class CemIteration:
    iteration: int
    mean_score: float
    elite_score: float
    best_score: float
    info: dict = field(default_factory=dict)


def cem_optimize(
    fitness: Callable[[np.ndarray, int], tuple[float, dict]],
    mean: np.ndarray,
    cfg: CemConfig,
    seed: int = 0,
    callback: Callable[[CemIteration, list[tuple[float, np.ndarray]]], None] | None = None,
):
    """Maximize ``fitness(x, iteration)`` with a diagonal-Gaussian cross-entropy search.

    Every candidate of an iteration is scored with the same iteration index, so a
    fitness that derives episode seeds from it compares candidates on common noise.
    Returns (final mean, history, ranked candidates of every iteration).
    """
    rng = np.random.default_rng([int(seed), 104729])
    mean = np.asarray(mean, dtype=float).copy()
    std = np.full_like(mean, cfg.init_std)
    history: list[CemIteration] = []
    pool: list[tuple[float, int, np.ndarray]] = []
    for it in range(cfg.iterations):
        xs = mean + std * rng.standard_normal((cfg.population, len(mean)))
        scored = []
        infos = []
        for x in xs:
            s, info = fitness(x, it)
            if not math.isfinite(s):
                raise NumericalFailureError(f"non-finite return {s!r} at iteration {it}; parameters {x.tolist()}")
            scored.append(s)
            infos.append(info)
        order = np.argsort(-np.asarray(scored), kind="stable")
        elite = xs[order[: cfg.elite]]
        mean = elite.mean(axis=0)
        decay = 1.0 - it / max(cfg.iterations - 1, 1)
        std = elite.std(axis=0) + cfg.extra_std * decay
        merged = {k: float(np.mean([i[k] for i in infos])) for k in (infos[0] if infos else {})}
        rec = CemIteration(it, float(np.mean(scored)), float(np.mean([scored[i] for i in order[: cfg.elite]])),
                           float(scored[order[0]]), merged)
        history.append(rec)
        pool.extend((scored[i], it, xs[i]) for i in order[: cfg.finalists])
        log.info("cem it=%d mean=%.2f elite=%.2f best=%.2f", it, rec.mean_score, rec.elite_score, rec.best_score)
        if callback is not None:
            callback(rec, [(scored[i], xs[i]) for i in order])
    pool.sort(key=lambda e: (-e[0], e[1]))
    return mean, history, [x for _, _, x in pool]


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list[dict]
    episodes: list[RolloutRecord]
    eval_score: float


def train(cfg: EnvConfig, method: str, cem: CemConfig | None = None, seed: int = 0, omega: float = 1.0,
          keep_episodes: bool = False, jobs: int = 1) -> TrainResult:
    """CEM search over policy parameters, scored by mean discounted return.

    The returned parameters are the best by mean discounted return over an
    evaluation batch, among the final search mean and the top-scoring candidates.
    """
    if method not in LEARNED:
        raise InvalidInputError(f"method {method!r} has no learnable parameters")
    cem = cem or CemConfig()
    curve: list[dict] = []
    kept: list[RolloutRecord] = []
    scen = "obstacle" if cfg.obstacle is not None else "clean"

    def seeds_for(it: int) -> list[int]:
        base = 1_000_000 * (seed + 1) + 1000 * it
        return [base + k for k in range(cem.episodes_per_candidate)]

    def fitness(x, it):
        recs = run_many(cfg, method, PolicyParams.from_flat(x), seeds_for(it), omega, jobs)
        if keep_episodes:
            kept.extend(recs)
        m = summarize(recs)
        return m.mean_reward, {"len": m.mean_len, "success": m.success_pct}

    def record(it_rec: CemIteration, ranked):
        curve.append({
            "iteration": it_rec.iteration,
            "scenario": scen,
            "birth_mode": birth_mode(cfg),
            "mean_len": it_rec.info.get("len", float("nan")),
            "mean_reward": it_rec.mean_score,
            "success_pct": it_rec.info.get("success", float("nan")),
        })

    mean, _, ranked = cem_optimize(fitness, PolicyParams.zeros().flat(), cem, seed, record)
    eval_seeds = [2_000_000 * (seed + 1) + k for k in range(cem.eval_episodes)]
    best_score, best = -math.inf, mean
    for cand in [mean, *ranked[: cem.finalists]]:
        recs = run_many(cfg, method, PolicyParams.from_flat(cand), eval_seeds, omega, jobs)
        if keep_episodes:
            kept.extend(recs)
        score = summarize(recs).mean_reward
        if score > best_score:
            best_score, best = score, cand
    return TrainResult(PolicyParams.from_flat(best), curve, kept, best_score)


def save_params(path, params: PolicyParams, cfg: EnvConfig) -> None:
    Path(path).write_text(json.dumps(params.to_dict(cfg.digest()), indent=2) + "\n")


def load_params(path) -> tuple[PolicyParams, str]:
    doc = json.loads(Path(path).read_text())
    return PolicyParams.from_dict(doc), doc.get("config_hash", "")
