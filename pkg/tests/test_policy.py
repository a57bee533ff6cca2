import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from davs import policy as pol
from davs.env import (
    IPEnv,
    apply_camera,
    east_north,
    reset,
    ring_count_from,
    scenario_config,
    write_jsonl,
    read_jsonl,
)
from davs.errors import InvalidInputError, NumericalFailureError
from davs.manifold import SoiKeypointSet, build_davs, tangent_frame
from oracles import chord_arc

CLEAN = scenario_config("clean")
OBST = scenario_config("obstacle")
SHORT = CLEAN.replace(t_max=30)
TINY_CEM = pol.CemConfig(population=4, elite=2, iterations=2, eval_episodes=2, finalists=1)


def random_params(seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return pol.PolicyParams.from_flat(rng.normal(scale=scale, size=pol.PolicyParams.size()))


def frame_at(tr, cfg):
    obs = tr.prev
    m = build_davs(SoiKeypointSet(obs.keypoints), cfg.chart.point(obs.camera), cfg.chart)
    return tangent_frame(m)


def ccw_angle(frame, d):
    """Counter-clockwise angle of d from v2, via arccos and a side test."""
    a = math.acos(max(-1.0, min(1.0, float(d @ frame.v2))))
    side = float(np.cross(frame.v2, d) @ frame.normal)
    return a if side >= 0 else 2 * math.pi - a


class TestParams:
    def test_layout(self):
        assert pol.PolicyParams.size() == 55
        p = random_params(1)
        assert np.array_equal(pol.PolicyParams.from_flat(p.flat()).flat(), p.flat())

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            pol.PolicyParams(np.full((5, 10), np.nan), np.zeros(5))
        with pytest.raises(InvalidInputError):
            pol.PolicyParams.from_flat(np.zeros(3))

    def test_json_round_trip(self, tmp_path):
        p = random_params(2)
        path = tmp_path / "p.json"
        pol.save_params(path, p, CLEAN)
        back, digest = pol.load_params(path)
        assert digest == CLEAN.digest()
        assert np.array_equal(back.flat(), p.flat())

    def test_foreign_layout(self):
        doc = random_params(3).to_dict()
        doc["features"] = ["pitch"]
        with pytest.raises(InvalidInputError):
            pol.PolicyParams.from_dict(doc)

    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_outputs_are_bounded(self, seed, scale):
        params = random_params(seed, scale)
        _, obs = reset(CLEAN.replace(camera_birth="random", ee_birth="random"), seed)
        out = pol.sample_policy(params, obs, CLEAN, np.random.default_rng(seed))
        assert 0.0 <= out.u <= 1.0
        assert 0.0 <= out.step <= CLEAN.cam_max_step
        assert np.all(np.abs(out.ee_delta) <= CLEAN.ee_max_step)


class TestDavsRollout:
    def test_zero_width_pursues_centroid(self):
        rec = pol.rollout(CLEAN, "davs", random_params(4), seed=4, omega=0.0)
        assert rec.fallback_steps == 0
        for tr in rec.transitions:
            f = frame_at(tr, CLEAN)
            assert chord_arc(tr.action.cam_direction, f.v0) <= 1e-9

    @pytest.mark.parametrize("omega", [0.0, 0.5, 1.0])
    def test_replay_stays_in_cone(self, omega):
        recs = [pol.rollout(CLEAN.replace(camera_birth="random", ee_birth="random"), "davs",
                            random_params(s, 1.0), s, omega) for s in range(3)]
        assert pol.validate_constraints(recs).violations == []
        for rec in recs:
            for tr in rec.transitions:
                if tr.fallback:
                    continue
                f = frame_at(tr, CLEAN)
                lo, hi = f.cone(omega)
                a = ccw_angle(f, tr.action.cam_direction)
                assert lo - 1e-7 <= a <= hi + 1e-7 or abs(a - 2 * math.pi) <= 1e-7

    def test_validator_catches_outside_directions(self):
        rec = pol.rollout(CLEAN, "davs", None, 0, 0.5)
        tr = rec.transitions[0]
        flipped = pol.Transition(tr.prev, pol.ActionPair(-tr.action.cam_direction, 0.0, tr.action.ee_delta),
                                 tr.obs, tr.reward, tr.cone)
        rec.transitions[0] = flipped
        assert pol.validate_constraints([rec]).violations == [(0, 0)]

    def test_deterministic(self):
        a = pol.rollout(CLEAN, "davs", random_params(5), 9, 0.5)
        b = pol.rollout(CLEAN, "davs", random_params(5), 9, 0.5)
        assert a.steps == b.steps
        assert all(np.array_equal(x.action.cam_direction, y.action.cam_direction)
                   for x, y in zip(a.transitions, b.transitions))

    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    def test_first_step_support_nests(self, seed, a, b):
        a, b = sorted((a, b))
        cfg = SHORT.replace(camera_birth="random")
        params = random_params(seed, 1.0)
        narrow = pol.rollout(cfg.replace(t_max=1), "davs", params, seed, a).transitions[0]
        wide = pol.rollout(cfg.replace(t_max=1), "davs", params, seed, b).transitions[0]
        assert wide.cone.contains(narrow.action.cam_direction)

    def test_degenerate_soi_falls_back(self):
        cfg = SHORT.replace(max_aperture=0.0)
        rec = pol.rollout(cfg, "davs", None, 0, 1.0)
        assert rec.fallback_steps == rec.length
        rep = pol.validate_constraints([rec])
        assert rep.fallback == rec.length and rep.violations == []

    def test_bad_omega(self):
        with pytest.raises(InvalidInputError):
            pol.davs_rollout(IPEnv(CLEAN), pol.PolicyParams.zeros(), 1.5, 0)


class TestUnconstrained:
    def test_untrained_headings_are_uniform(self):
        angles = []
        for seed in range(6):
            rec = pol.rollout(CLEAN.replace(camera_birth="random", ee_birth="random"), "no-davs", None, seed)
            for tr in rec.transitions:
                east, north = east_north(tr.prev.pitch, tr.prev.yaw)
                d = tr.action.cam_direction
                angles.append(math.atan2(float(d @ north), float(d @ east)) % (2 * math.pi))
        counts, _ = np.histogram(angles, bins=12, range=(0, 2 * math.pi))
        assert len(angles) >= 600
        assert stats.chisquare(counts).pvalue > 0.01

    def test_reproducible(self):
        a = pol.rollout(CLEAN, "no-davs", random_params(6), 2)
        b = pol.rollout(CLEAN, "no-davs", random_params(6), 2)
        assert a.steps == b.steps

    def test_untrained_rarely_succeeds(self):
        metrics, _ = pol.evaluate(None, CLEAN, "no-davs", 40, range(40))
        assert metrics.success_pct <= 25.0
        assert metrics.median_len == CLEAN.t_max


class TestVisualServoing:
    def test_holds_at_local_maximum(self):
        cfg = CLEAN.replace(fov_half_angle_deg=60.0)
        _, obs = reset(cfg, 0)
        assert obs.n_ring == cfg.loop_vertices
        act = pol.visual_servoing_policy(obs, cfg)
        assert act.cam_step == 0.0 and not act.cam_direction.any()

    def test_stalls_behind_obstacle(self):
        rec = pol.rollout(OBST, "vs", None, 0)
        poses = {(s["pitch"], s["yaw"]) for s in rec.steps}
        assert len(poses) == 1
        assert not rec.success

    @given(st.integers(0, 10_000), st.sampled_from(["clean", "obstacle"]))
    def test_greedy_step_never_loses_ring(self, seed, scenario):
        cfg = scenario_config(scenario, camera_birth="random", ee_birth="random")
        _, obs = reset(cfg, seed)
        act = pol.visual_servoing_policy(obs, cfg)
        after = apply_camera(cfg, obs.pitch, obs.yaw, act.cam_direction, act.cam_step)
        assert ring_count_from(obs.keypoints, cfg, *after) >= ring_count_from(obs.keypoints, cfg, obs.pitch, obs.yaw)

    def test_opens_the_bag(self):
        _, obs = reset(CLEAN, 0)
        act = pol.visual_servoing_policy(obs, CLEAN)
        handle = np.asarray(CLEAN.handle)
        assert np.linalg.norm(obs.ee + act.ee_delta - handle) > np.linalg.norm(obs.ee - handle)


class TestStatic:
    def test_camera_never_moves(self):
        rec = pol.rollout(CLEAN, "static", random_params(7, 2.0), 3)
        start = rec.transitions[0].prev
        assert all((tr.obs.pitch, tr.obs.yaw) == (start.pitch, start.yaw) for tr in rec.transitions)
        assert all(not tr.action.cam_direction.any() for tr in rec.transitions)

    def test_occluded_birth_never_succeeds(self):
        recs = [pol.rollout(OBST, "static", random_params(s, 2.0), s) for s in range(100)]
        assert sum(r.success for r in recs) == 0
        assert all(s["n_ring"] == 0 for r in recs for s in r.steps)


class TestCem:
    TARGET = math.radians(100.0)

    def bandit(self):
        """One-step reduction: reward is the cosine between the chosen heading and a planted one."""
        _, obs = reset(CLEAN, 0)

        def fitness(x, it):
            params = pol.PolicyParams.from_flat(x)
            rng = np.random.default_rng(it)
            total = 0.0
            for _ in range(4):
                u = pol.sample_policy(params, obs, CLEAN, rng).u
                total += math.cos(2 * math.pi * u - self.TARGET)
            return total / 4, {}

        return obs, fitness

    def test_recovers_planted_direction(self):
        obs, fitness = self.bandit()
        cfg = pol.CemConfig(iterations=50)
        mean, history, _ = pol.cem_optimize(fitness, np.zeros(pol.PolicyParams.size()), cfg, seed=3)
        params = pol.PolicyParams.from_flat(mean)
        u = pol.sample_policy(pol.PolicyParams(params.weights, np.full(5, -50.0)), obs, CLEAN,
                              np.random.default_rng(0)).u
        err = (2 * math.pi * u - self.TARGET + math.pi) % (2 * math.pi) - math.pi
        assert abs(math.degrees(err)) <= 5.0
        elite = [h.elite_score for h in history]
        windows = [np.mean(elite[k:k + 5]) for k in range(0, 50, 5)]
        assert windows[-1] >= windows[0]
        assert sum(b >= a - 1e-3 for a, b in zip(windows, windows[1:])) >= 7

    def test_non_finite_return_aborts(self):
        with pytest.raises(NumericalFailureError, match="non-finite"):
            pol.cem_optimize(lambda x, it: (float("nan"), {}), np.zeros(3), TINY_CEM)

    def test_identical_seeds_identical_curves(self):
        a = pol.train(SHORT, "davs", TINY_CEM, seed=1)
        b = pol.train(SHORT, "davs", TINY_CEM, seed=1)
        assert a.curve == b.curve
        assert np.array_equal(a.params.flat(), b.params.flat())
        assert [row["iteration"] for row in a.curve] == [0, 1]

    def test_vs_is_not_trainable(self):
        with pytest.raises(InvalidInputError):
            pol.train(SHORT, "vs", TINY_CEM)

    def test_config_checks(self):
        with pytest.raises(InvalidInputError):
            pol.CemConfig(population=4, elite=5)


class TestEvaluate:
    def test_schema_and_consistency(self, tmp_path):
        metrics, recs = pol.evaluate(None, SHORT, "no-davs", 6, range(6))
        assert metrics.episodes == 6
        assert 0.0 <= metrics.success_pct <= 100.0
        for r in recs:
            if r.success:
                assert r.length < SHORT.t_max
            if r.done_reason == "timeout":
                assert r.length == SHORT.t_max
        row = {"method": "no-davs", "scenario": "clean", "birth_mode": pol.birth_mode(SHORT),
               "mean_len": metrics.mean_len, "mean_reward": metrics.mean_reward, "success_pct": metrics.success_pct}
        path = tmp_path / "eval.csv"
        pol.write_csv(path, pol.EVAL_COLUMNS, [row])
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == pol.EVAL_COLUMNS

    def test_all_success_batch(self):
        metrics, recs = pol.evaluate(None, CLEAN, "davs", 5, range(5))
        assert all(r.success for r in recs)
        assert metrics.success_pct == 100.0

    def test_replay_from_jsonl(self, tmp_path):
        metrics, recs = pol.evaluate(random_params(8), SHORT, "davs", 5, range(5), omega=0.5)
        logs = []
        for r in recs:
            path = tmp_path / f"ep{r.seed}.jsonl"
            write_jsonl(path, r.steps)
            logs.append(read_jsonl(path))
        assert pol.summarize_logs(logs, SHORT.discount) == metrics

    def test_discounted_return_recomputes(self):
        rec = pol.rollout(CLEAN, "davs", random_params(9), 1, 1.0)
        g = CLEAN.discount
        assert rec.discounted_return == pytest.approx(
            math.fsum(g ** k * tr.reward for k, tr in enumerate(rec.transitions)), rel=1e-12, abs=1e-9)

    def test_parallel_matches_serial(self):
        serial = pol.run_many(SHORT, "davs", random_params(10), [0, 1], 1.0, jobs=1)
        parallel = pol.run_many(SHORT, "davs", random_params(10), [0, 1], 1.0, jobs=2)
        assert [r.steps for r in serial] == [r.steps for r in parallel]

    def test_bad_inputs(self):
        with pytest.raises(InvalidInputError):
            pol.evaluate(None, SHORT, "davs", 0)
        with pytest.raises(InvalidInputError):
            pol.rollout(SHORT, "teleport", None, 0)
        with pytest.raises(InvalidInputError):
            pol.summarize([])

    def test_csv_rows_round_trip(self, tmp_path):
        rows = [{"iteration": 0, "scenario": "clean", "birth_mode": "fixed/fixed", "mean_len": 3.0,
                 "mean_reward": 1.5, "success_pct": 100.0}]
        path = tmp_path / "curve.csv"
        pol.write_csv(path, pol.CURVE_COLUMNS, rows)
        with open(path) as fh:
            back = list(csv.DictReader(fh))
        assert back[0]["success_pct"] == "100.0"
        assert json.dumps(list(back[0])) == json.dumps(list(pol.CURVE_COLUMNS))
