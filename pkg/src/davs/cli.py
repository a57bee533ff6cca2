"""Command-line front end: run episodes, train and evaluate policies, sweep omega, export manifolds.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 degenerate input.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import policy as pol
from .env import SCENARIOS, EnvConfig, camera_point, load_config, scenario_config, write_jsonl
from .errors import ConfigError, DavsError, DegenerateError, InvalidInputError
from .manifold import build_davs, keypoints_from_dict, manifold_issues, manifold_to_dict

log = logging.getLogger("davs")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file of environment settings")
    common.add_argument("--scenario", choices=SCENARIOS, default="clean")
    common.add_argument("--camera-birth", choices=("fixed", "random"))
    common.add_argument("--ee-birth", choices=("fixed", "random"))
    common.add_argument("--method", choices=pol.METHODS, default="davs")
    common.add_argument("--omega", type=float, action="append", help="cone width in [0, 1]; repeatable for ablate-omega")
    common.add_argument("--seed", type=int, action="append", help="repeatable")
    common.add_argument("--episodes", type=int, default=100)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--params", type=Path, help="trained parameter JSON (episode/evaluate)")
    common.add_argument("--population", type=int)
    common.add_argument("--elite", type=int)
    common.add_argument("--iterations", type=int)

    p = argparse.ArgumentParser(prog="davs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("episode", parents=[common], help="run one episode and write its JSONL log")
    sub.add_parser("train", parents=[common], help="CEM policy search; writes parameters and a learning curve")
    sub.add_parser("evaluate", parents=[common], help="evaluate a method over seeded episodes")
    sub.add_parser("ablate-omega", parents=[common], help="train and evaluate each omega plus baselines on both scenarios")
    ex = sub.add_parser("export-davs", parents=[common], help="build a manifold from a keypoint file")
    ex.add_argument("--keypoints", type=Path, required=True)
    ex.add_argument("--pitch", type=float, required=True, help="camera pitch in degrees")
    ex.add_argument("--yaw", type=float, required=True, help="camera yaw in degrees")
    return p


def env_config(args, scenario: str | None = None) -> EnvConfig:
    cfg = scenario_config(scenario or args.scenario)
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    changes = {}
    if args.camera_birth:
        changes["camera_birth"] = args.camera_birth
    if args.ee_birth:
        changes["ee_birth"] = args.ee_birth
    return cfg.replace(**changes) if changes else cfg


def cem_config(args) -> pol.CemConfig:
    base = pol.CemConfig()
    return pol.CemConfig(
        population=args.population or base.population,
        elite=args.elite or base.elite,
        iterations=args.iterations or base.iterations,
    )


def _omega(args) -> float:
    om = args.omega[-1] if args.omega else 1.0
    _check_omega(om)
    return om


def _check_omega(om: float) -> None:
    if not (0.0 <= om <= 1.0) or math.isnan(om):
        raise ConfigError(f"omega: {om} is outside [0, 1]")


def _seeds(args, default_count: int = 1) -> list[int]:
    return list(args.seed) if args.seed else list(range(default_count))


def _load_params(args, cfg: EnvConfig):
    if args.params is None:
        return None
    try:
        params, digest = pol.load_params(args.params)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"params: cannot read {args.params} ({exc})") from exc
    if digest and digest != cfg.digest():
        log.warning("parameters were trained under config %s, running under %s", digest, cfg.digest())
    return params


def cmd_episode(args) -> int:
    cfg = env_config(args)
    seed = _seeds(args)[0]
    om = _omega(args)
    rec = pol.rollout(cfg, args.method, _load_params(args, cfg), seed, om)
    args.out.mkdir(parents=True, exist_ok=True)
    label = pol.method_label(args.method, om if args.method == "davs" else None)
    path = args.out / f"episode_{args.scenario}_{label}_seed{seed}.jsonl"
    write_jsonl(path, rec.steps)
    print(f"{label} seed={seed} length={rec.length} return={rec.discounted_return:.3f} "
          f"outcome={rec.done_reason} fallback_steps={rec.fallback_steps} log={path}")
    return 0


def cmd_train(args) -> int:
    cfg = env_config(args)
    om = _omega(args)
    seed = _seeds(args)[0]
    res = pol.train(cfg, args.method, cem_config(args), seed, om, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    label = pol.method_label(args.method, om if args.method == "davs" else None)
    pol.save_params(args.out / f"params_{args.scenario}_{label}.json", res.params, cfg)
    pol.write_csv(args.out / f"curve_{args.scenario}_{label}.csv", pol.CURVE_COLUMNS, res.curve)
    print(f"{label}: evaluation return {res.eval_score:.3f} after {len(res.curve)} iterations")
    return 0


def _eval_row(method, om, scenario, cfg, metrics) -> dict:
    return {
        "method": pol.method_label(method, om if method == "davs" else None),
        "scenario": scenario,
        "birth_mode": pol.birth_mode(cfg),
        "mean_len": f"{metrics.mean_len:.3f}",
        "mean_reward": f"{metrics.mean_reward:.3f}",
        "success_pct": f"{metrics.success_pct:.1f}",
    }


def cmd_evaluate(args) -> int:
    cfg = env_config(args)
    om = _omega(args)
    seeds = _seeds(args, args.episodes)
    metrics, records = pol.evaluate(_load_params(args, cfg), cfg, args.method, len(seeds), seeds, om, args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    row = _eval_row(args.method, om, args.scenario, cfg, metrics)
    pol.write_csv(args.out / f"eval_{args.scenario}_{row['method']}.csv", pol.EVAL_COLUMNS, [row])
    with open(args.out / f"episodes_{args.scenario}_{row['method']}.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps({"seed": rec.seed, "steps": rec.steps}) + "\n")
    print(",".join(row[c] for c in pol.EVAL_COLUMNS))
    return 0


def cmd_ablate_omega(args) -> int:
    omegas = list(args.omega or [])
    for om in omegas:
        _check_omega(om)
    cem = cem_config(args)
    seed = _seeds(args)[0]
    rows = []
    for scenario in SCENARIOS:
        cfg = env_config(args, scenario)
        eval_seeds = [10_000_000 + k for k in range(args.episodes)]
        runs = [("davs", om) for om in omegas] + [("vs", None), ("no-davs", None), ("static", None)]
        for method, om in runs:
            params = None
            if method in pol.LEARNED:
                params = pol.train(cfg, method, cem, seed, om if om is not None else 1.0, jobs=args.jobs).params
            metrics, _ = pol.evaluate(params, cfg, method, args.episodes, eval_seeds,
                                      om if om is not None else 1.0, args.jobs)
            rows.append(_eval_row(method, om, scenario, cfg, metrics))
            log.info("%s %s: %s", scenario, rows[-1]["method"], metrics)
    args.out.mkdir(parents=True, exist_ok=True)
    pol.write_csv(args.out / "ablation.csv", pol.EVAL_COLUMNS, rows)
    for row in rows:
        print(",".join(row[c] for c in pol.EVAL_COLUMNS))
    return 0


def cmd_export_davs(args) -> int:
    cfg = env_config(args)
    try:
        doc = json.loads(args.keypoints.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"keypoints: cannot read {args.keypoints} ({exc})") from exc
    kps = keypoints_from_dict(doc)
    p0 = camera_point(cfg, math.radians(args.pitch), math.radians(args.yaw))
    m = build_davs(kps, p0, cfg.chart)
    issues = manifold_issues(m)
    if issues:
        log.warning("manifold invariant issues: %s", "; ".join(issues))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "davs.json"
    path.write_text(json.dumps(manifold_to_dict(m)) + "\n")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "episode": cmd_episode,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate-omega": cmd_ablate_omega,
    "export-davs": cmd_export_davs,
}


def main(argv=None) -> int:
    level = os.environ.get("DAVS_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("jobs: must be at least 1")
        if args.episodes < 1:
            raise ConfigError("episodes: must be at least 1")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DavsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
