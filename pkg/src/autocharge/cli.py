"""Command line orchestration.

Subcommands: perceive, cover-experiment, train, bench, servo-demo, full.
Exit codes: 0 success, 1 stage failure, 2 usage/config error.  Stage
failures also emit a machine-readable JSON object on stderr.  Every
command honors --seed: primary CSV/JSON outputs are byte-identical
across reruns; wall-clock data lives only in meta.json.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
import zlib
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .control import (attempt_probe, hinge_axis_pose, open_cover,
                      perceive_cover_stage, run_pipeline, sample_servo_start,
                      servo_search)
from .episode import EpisodeLog
from .errors import (AmbiguousCoverError, AutochargeError,
                     ClusterConvergenceError, InvalidConfigError, StageError,
                     UsageError, VisibilityError)
from .geometry import compose, invert
from .perception import save_ply
from .policy import (InsertionEnv, PolicyParams, evaluate_policy,
                     load_policy, random_search, save_policy, spiral_search,
                     train_insertion_policy)
from .reports import (bench_figure, cover_experiment_figure,
                      perceive_figure, pixel_error_figure,
                      reward_curve_figure, write_csv, write_json)
from .simworld import Scene, build_scene

# centre-error injections cycled over the experiment angles (meters);
# magnitudes span the few-centimetre regime the probe has to recover
DEFAULT_INJECTIONS = (-0.021, 0.013, 0.034, -0.008)

DEFAULT_ANGLES = (15.0, 30.0, 45.0, 60.0, 75.0)


def _bundled_policy_path() -> Path:
    return Path(resources.files("autocharge").joinpath("assets/smoke_policy.npz"))


def _emit_error(exc: Exception, stage: str | None = None) -> None:
    payload = {"error": {"type": type(exc).__name__,
                         "stage": stage or getattr(exc, "stage", None),
                         "message": str(exc)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, args, t0: float) -> None:
    meta = {"argv": [str(a) for a in sys.argv[1:]],
            "command": args.command,
            "seed": args.seed,
            "wall_time_s": time.perf_counter() - t0,
            "timestamp": time.time()}
    write_json(out / "meta.json", meta)


def _write_table(out: Path, name: str, fieldnames, rows, fmt: str) -> None:
    if fmt in ("csv", "both"):
        write_csv(out / f"{name}.csv", fieldnames, rows)
    if fmt in ("json", "both"):
        write_json(out / f"{name}.json", {"rows": rows})


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "angle", None) is not None:
        cfg.scene = replace(cfg.scene, cover_angle_deg=args.angle)
    if getattr(args, "inject", None) is not None:
        cfg.perception = replace(cfg.perception,
                                 injected_center_error=args.inject)
    return cfg


# --------------------------------------------------------------------------
# Single cover sequence: perceive -> attempt -> open (shared by 2 commands)
# --------------------------------------------------------------------------

def _run_cover_sequence(cfg: RunConfig, angle: float, inject: float, seed: int,
                        artifacts: dict | None = None, run_open: bool = True) -> dict:
    scene_cfg = replace(cfg.scene, cover_angle_deg=angle)
    perception = replace(cfg.perception, injected_center_error=inject)
    row = {"angle_deg": angle, "seed": seed, "outcome": "failed",
           "injected_m": inject, "xe_m": None, "x2_m": None,
           "center_error_m": None, "xe_recovery_error_mm": None,
           "open_outcome": "not_run"}
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    try:
        scene, state = build_scene(scene_cfg)
        est, pose_w, state = perceive_cover_stage(scene, state, perception,
                                                  seed, rng, artifacts)
        row["outcome"] = "ok"
        row["estimate"] = est
    except (AmbiguousCoverError, ClusterConvergenceError) as exc:
        row["outcome"] = "ambiguous"
        row["error"] = str(exc)
        return row
    except AutochargeError as exc:
        row["outcome"] = "failed"
        row["error"] = str(exc)
        return row
    # ground-truth centre error of the (injected) estimate along its x-axis:
    # the quantity the probe is supposed to recover as -x_e
    truth = scene.cover_pose_world(state.cover_angle)
    x_err = float((pose_w.translation - truth.translation)
                  @ pose_w.rotation.matrix[:, 0])
    row["center_error_m"] = x_err
    try:
        result, pose_w, state = attempt_probe(scene, state, pose_w, cfg.probe)
        row["xe_m"] = result.xe
        row["x2_m"] = result.x2
        row["xe_recovery_error_mm"] = 1000.0 * abs(result.xe + x_err)
    except AutochargeError as exc:
        row["open_outcome"] = "attempt_failed"
        row["error"] = str(exc)
        return row
    if not run_open:
        return row
    try:
        cam = scene.perception_camera_pose
        est_cb = compose(invert(cam), pose_w)
        r_cp = invert(cam).rotation @ scene.plane_pose.rotation
        axis_w = compose(cam, hinge_axis_pose(est_cb, scene_cfg.cover_radius, r_cp))
        outcome, state = open_cover(scene, state, pose_w, axis_w, cfg.opening)
        row["open_outcome"] = outcome
        row["final_angle_deg"] = math.degrees(state.cover_angle)
    except AutochargeError as exc:
        row["open_outcome"] = "error"
        row["error"] = str(exc)
    return row


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_perceive(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    out = _prepare_out(args)
    artifacts: dict = {}
    inject = cfg.perception.injected_center_error
    row = _run_cover_sequence(cfg, cfg.scene.cover_angle_deg, inject, args.seed,
                              artifacts, run_open=False)
    est = row.pop("estimate", None)
    for name, cloud in artifacts.items():
        save_ply(cloud, out / f"{name}.ply")
    if est is not None:
        write_json(out / "estimate.json", {
            "center_m": est.center.tolist(),
            "normal": est.normal.tolist(),
            "rotation": est.pose.rotation.matrix.tolist(),
            "cluster_size": est.cluster_size,
            "plane_fit_angle_deg": math.degrees(est.plane_fit_angle),
        })
    fields = ["angle_deg", "seed", "outcome", "injected_m", "center_error_m",
              "xe_m", "x2_m", "xe_recovery_error_mm", "open_outcome"]
    _write_table(out, "perceive", fields, [{k: row.get(k) for k in fields}],
                 args.format)
    perceive_figure(artifacts, est, out / "perceive.png")
    _write_meta(out, args, t0)
    if row["outcome"] != "ok":
        _emit_error(AutochargeError(row.get("error", row["outcome"])),
                    stage="perceive_cover")
        return 1
    return 0


def cmd_cover_experiment(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    angles = [float(a) for a in args.angles.split(",")] if args.angles else list(DEFAULT_ANGLES)
    out = _prepare_out(args)
    rows = []
    seq = np.random.SeedSequence(args.seed)
    seeds = [int(s.generate_state(1)[0]) for s in seq.spawn(len(angles) * args.trials)]
    k = 0
    for i, angle in enumerate(angles):
        inject = DEFAULT_INJECTIONS[i % len(DEFAULT_INJECTIONS)]
        for trial in range(args.trials):
            row = _run_cover_sequence(cfg, angle, inject, seeds[k])
            row.pop("estimate", None)
            row["trial"] = trial
            rows.append(row)
            k += 1
    fields = ["angle_deg", "trial", "seed", "outcome", "injected_m",
              "center_error_m", "xe_m", "x2_m", "xe_recovery_error_mm",
              "open_outcome"]
    table = [{f: r.get(f) for f in fields} for r in rows]
    _write_table(out, "cover_experiment", fields, table, args.format)
    summary = {
        "n_ok": sum(1 for r in rows if r["outcome"] == "ok"),
        "n_ambiguous": sum(1 for r in rows if r["outcome"] == "ambiguous"),
        "n_failed": sum(1 for r in rows if r["outcome"] == "failed"),
        "n_opened": sum(1 for r in rows if r["open_outcome"] == "success"),
        "failed_angles": sorted({r["angle_deg"] for r in rows
                                 if r["outcome"] != "ok"}),
    }
    write_json(out / "cover_experiment_summary.json", summary)
    cover_experiment_figure(table, out / "cover_experiment.png")
    _write_meta(out, args, t0)
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    out = _prepare_out(args)
    train = cfg.train
    if args.interactions is not None:
        train = replace(train, total_interactions=args.interactions)
    if args.geometries:
        train = replace(train, geometries=tuple(args.geometries.split(",")))
    policy, report = train_insertion_policy(cfg.scene, train, args.seed)
    save_policy(policy, out / "policy.npz")
    curve_rows = [{"step": s, "moving_avg_reward": m}
                  for s, m in zip(report.episode_ends, report.moving_avg)]
    write_csv(out / "reward_curve.csv", ["step", "moving_avg_reward"], curve_rows)
    write_json(out / "train_report.json", {
        "interactions": report.interactions,
        "episodes": len(report.episode_rewards),
        "episode_rewards": report.episode_rewards,
        "ma_window": report.ma_window,
        "final_moving_avg": report.moving_avg[-1] if report.moving_avg else None,
        "diverged": report.diverged,
        "geometries": list(train.geometries),
    })
    reward_curve_figure(report.episode_ends, report.moving_avg,
                        out / "reward_curve.png")
    _write_meta(out, args, t0)
    if report.diverged:
        _emit_error(AutochargeError("training diverged (non-finite loss)"),
                    stage="train")
        return 1
    return 0


def _bench_proposed_trial(cfg: RunConfig, scene: Scene, env: InsertionEnv,
                          policy: PolicyParams, rng: np.random.Generator,
                          handoff: bool):
    if not handoff:
        res = evaluate_policy(env, policy, trials=1)
        return res[0]
    _, state0 = build_scene(scene.cfg)
    state0 = replace(state0, cover_angle=math.radians(95.0))
    servo_cfg = replace(cfg.servo, max_offset=cfg.bench.handoff_offset)
    start = sample_servo_start(scene, rng, servo_cfg.max_offset)
    outcome, state, _ = servo_search(scene, state0, start, servo_cfg, rng)
    if outcome != "success":
        return {"success": False, "steps": 0, "sim_time": state.time,
                "reason": f"servo_{outcome}"}
    offset = scene.to_plane(state.ee_pose.translation)[:2]
    obs = env.reset(offset=offset)
    done, info = False, {}
    while not done:
        from .policy import policy_act
        obs, _, done, info = env.step(policy_act(policy, obs))
    info["sim_time"] = env.sim_time + state.time
    return info


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    out = _prepare_out(args)
    bench = cfg.bench
    if args.trials is not None:
        bench = replace(bench, trials=args.trials)
    if args.methods:
        bench = replace(bench, methods=tuple(args.methods.split(",")))
    if args.handoff:
        bench = replace(bench, handoff=True)
    insert = replace(cfg.insert, offset=bench.offset)
    policy = None
    if "proposed" in bench.methods:
        path = Path(args.policy) if args.policy else _bundled_policy_path()
        if not path.exists():
            raise UsageError(f"policy file not found: {path}")
        policy = load_policy(path)

    method_rows = []
    trial_rows = []
    for method in bench.methods:
        method_tag = zlib.crc32(method.encode("ascii"))
        streams = np.random.SeedSequence((args.seed, method_tag)).spawn(
            bench.trials + 1)
        act_rng = np.random.default_rng(streams[0])
        results = []
        for t in range(bench.trials):
            env_rng = np.random.default_rng(streams[t + 1])
            scene = Scene(cfg.scene)
            env = InsertionEnv(scene, insert, env_rng)
            if method == "random":
                info = random_search(env, act_rng)
            elif method == "spiral":
                info = spiral_search(env)
            else:
                info = _bench_proposed_trial(cfg, scene, env, policy, env_rng,
                                             bench.handoff)
            results.append(info)
            trial_rows.append({"method": method, "trial": t,
                               "success": int(bool(info.get("success"))),
                               "steps": info.get("steps", 0),
                               "sim_time_s": info.get("sim_time", 0.0)})
        n_succ = sum(1 for r in results if r.get("success"))
        pos_bound = bench.handoff_offset if (method == "proposed" and bench.handoff) \
            else bench.offset
        orient_bound = 2.0 * math.pi if (method == "proposed" and bench.handoff) else 0.0
        method_rows.append({
            "method": method,
            "position_error_bound_m": pos_bound,
            "orientation_error_bound_rad": orient_bound,
            "success_rate": n_succ / bench.trials,
            "mean_sim_time_s": float(np.mean([r.get("sim_time", 0.0) for r in results])),
            "mean_steps": float(np.mean([r.get("steps", 0) for r in results])),
            "trials": bench.trials,
            "seed": args.seed,
        })
    fields = ["method", "position_error_bound_m", "orientation_error_bound_rad",
              "success_rate", "mean_sim_time_s", "mean_steps", "trials", "seed"]
    _write_table(out, "bench", fields, method_rows, args.format)
    write_csv(out / "bench_trials.csv",
              ["method", "trial", "success", "steps", "sim_time_s"], trial_rows)
    bench_figure(method_rows, out / "bench.png")
    _write_meta(out, args, t0)
    return 0


def cmd_servo_demo(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    out = _prepare_out(args)
    scene, state = build_scene(cfg.scene)
    state = replace(state, cover_angle=math.radians(95.0))
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    servo_cfg = replace(cfg.servo, max_offset=args.max_offset)
    log = EpisodeLog()
    start = sample_servo_start(scene, rng, servo_cfg.max_offset)
    outcome, state, errors = servo_search(scene, state, start, servo_cfg, rng, log)
    target = scene.servo_target_pose
    pos_err = float(np.linalg.norm(state.ee_pose.translation - target.translation))
    log.outcome = outcome
    log.to_jsonl(out / "servo_log.jsonl")
    rows = [{"step": i, "pixel_error_px": e} for i, e in enumerate(errors)]
    write_csv(out / "pixel_error.csv", ["step", "pixel_error_px"], rows)
    pixel_error_figure([i * servo_cfg.dt for i in range(len(errors))], errors,
                       servo_cfg.threshold_px, out / "pixel_error.png")
    write_json(out / "result.json", {
        "outcome": outcome,
        "steps": len(errors),
        "final_pixel_error_px": errors[-1] if errors else None,
        "final_position_error_m": pos_err,
    })
    _write_meta(out, args, t0)
    if outcome != "success":
        _emit_error(VisibilityError(f"servo demo ended with outcome '{outcome}'")
                    if outcome == "visibility_lost" else
                    AutochargeError(f"servo demo ended with outcome '{outcome}'"),
                    stage="servo_search")
        return 1
    return 0


def cmd_full(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_run_config(args)
    out = _prepare_out(args)
    path = Path(args.policy) if args.policy else _bundled_policy_path()
    if not path.exists():
        raise UsageError(f"policy file not found: {path}")
    policy = load_policy(path)
    log = EpisodeLog()
    code = 0
    try:
        run_pipeline(cfg.scene, args.seed, cfg.perception, cfg.probe,
                     cfg.opening, cfg.servo, cfg.insert, policy, log)
    except StageError as exc:
        _emit_error(exc)
        code = 1
    except AutochargeError as exc:
        _emit_error(exc)
        code = 1
    log.to_jsonl(out / "full_log.jsonl")
    write_json(out / "result.json", {"outcome": log.outcome,
                                     "stages": log.stages})
    _write_meta(out, args, t0)
    return code


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autocharge",
        description="Vision-force automatic charging simulation suite")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--format", choices=("csv", "json", "both"),
                        default="both")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perceive", parents=[common],
                       help="cover perception + contact probe on one scene")
    p.add_argument("--angle", type=float, default=None, help="cover angle, deg")
    p.add_argument("--inject", type=float, default=None,
                   help="centre error injected along the cover x-axis, m")
    p.set_defaults(func=cmd_perceive)

    p = sub.add_parser("cover-experiment", parents=[common],
                       help="perceive/probe/open sweep over cover angles")
    p.add_argument("--angles", default=None, help="comma list of degrees")
    p.add_argument("--trials", type=int, default=1, help="trials per angle")
    p.set_defaults(func=cmd_cover_experiment)

    p = sub.add_parser("train", parents=[common],
                       help="train the insertion policy")
    p.add_argument("--interactions", type=int, default=None)
    p.add_argument("--geometries", default=None, help="comma list of hole shapes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", parents=[common],
                       help="peg-in-hole benchmark over methods")
    p.add_argument("--policy", default=None, help="trained policy file (.npz)")
    p.add_argument("--methods", default=None, help="comma list of methods")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--handoff", action="store_true",
                   help="run the visual servo stage before 'proposed' trials")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("servo-demo", parents=[common],
                       help="visual servo run from a randomized start")
    p.add_argument("--max-offset", type=float, default=0.5,
                   help="start position envelope, m")
    p.set_defaults(func=cmd_servo_demo)

    p = sub.add_parser("full", parents=[common],
                       help="perceive, probe, open, servo and insert in one run")
    p.add_argument("--policy", default=None, help="trained policy file (.npz)")
    p.set_defaults(func=cmd_full)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidConfigError) as exc:
        _emit_error(exc, stage="usage")
        return 2
    except StageError as exc:
        _emit_error(exc)
        return 1
    except AutochargeError as exc:
        _emit_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
