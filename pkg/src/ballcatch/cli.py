"""Command-line entry point: ``ballcatch <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 config or schema error,
3 I/O error, 4 no feasible catch.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .ballistics import (BallState, DragModel, OriginRegion, IdentifiabilityError, estimate_drag, predict,
                         read_toss_csv, simulate_toss, synthesize_throw, write_toss_csv)
from .harness import ConfigError, load_preset, load_scenario, run_experiment
from .planner import (PlannerConfig, PlanningError, check_goal, plan_catch, plan_from_dict, plan_path,
                      plan_to_dict, validate_trajectory)
from .robot_model import N_JOINTS, DescriptionError, load_description
from .tracking import (PlantConfig, TrainingError, TrainOptions, collect_dataset, held_out_rmse, save_model,
                       train)

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
BALL_SCHEMA = "ballcatch.ball_state"
DRAG_SCHEMA = "ballcatch.drag_model"
MANIFEST_SCHEMA = "ballcatch.manifest"

log = logging.getLogger("ballcatch")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers ---------------------------------------------------------------

def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, argv) -> Path:
    """Everything needed to re-run the command: argv, resolved config and its hash."""
    doc = {
        "schema": MANIFEST_SCHEMA,
        "version": 1,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "config_sha256": _digest(config),
        "ballcatch_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from None
    return out


def _description(path):
    try:
        return load_description(path)
    except DescriptionError as exc:
        raise CliError(EXIT_CONFIG, f"robot description: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"robot description: {exc}") from None


def read_ball_state(path=None) -> tuple[BallState, np.ndarray | None]:
    """Ball state JSON; ``None`` reads the bundled example. Returns ``(state, q0 or None)``."""
    try:
        if path is None:
            text = resources.files("ballcatch.data").joinpath("example_ball.json").read_text()
        else:
            text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"ball state file not found: {path}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    try:
        doc = json.loads(text)
        if doc.get("schema") != BALL_SCHEMA or doc.get("version") != 1:
            raise ValueError("not a version-1 ball state file")
        state = BallState(doc["b"], doc["b_dot"], float(doc.get("t", 0.0)))
        q0 = doc.get("q0")
        if q0 is not None:
            q0 = np.asarray(q0, dtype=float)
            if q0.shape != (N_JOINTS,):
                raise ValueError("q0 must have 8 entries")
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CliError(EXIT_CONFIG, f"{path or 'example ball state'}: {exc}") from None
    return state, q0


def _scenario(args):
    if args.config and args.preset:
        raise CliError(EXIT_CONFIG, "give either --preset or --config, not both")
    try:
        cfg = load_scenario(args.config) if args.config else load_preset(args.preset or "experiment_b")
        learning = None if args.learning is None else args.learning == "on"
        return cfg.with_overrides(seed=args.seed, learning=learning, low_level=args.low_level,
                                  n_throws=args.n_throws, model_path=args.model)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    desc = _description(args.robot)
    out = _out_dir(args.out or Path("runs") / cfg.name)
    jobs = args.jobs or os.cpu_count() or 1
    log.info("running %s: %d throws, %d jobs", cfg.name, cfg.n_throws, jobs)
    try:
        rep = run_experiment(cfg, desc, jobs=jobs, out_dir=out)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except TrainingError as exc:
        raise CliError(EXIT_CONFIG, f"pre-shaping model: {exc}") from None
    write_manifest(out, "simulate", cfg.to_dict(), cfg.seed, sys.argv[1:] if args.argv is None else args.argv)
    lat = rep["latency"]
    rows = [
        ("scenario", cfg.name),
        ("episodes", rep["n_episodes"]),
        ("success rate", f"{rep['success_rate']:.3f}"),
        ("feasibility rate", f"{rep['feasibility_rate']:.3f}"),
        ("causes", ", ".join(f"{k}={v}" for k, v in rep["failure_causes"].items())),
        ("replan latency", f"mean {1e3 * lat['mean']:.1f} ms, p95 {1e3 * lat['p95']:.1f} ms (n={lat['count']})"),
        ("wall time", f"{rep['wall_time']:.1f} s"),
        ("output", str(out)),
    ]
    if rep["smoothness"]["n_compared"]:
        s = rep["smoothness"]
        rows.insert(5, ("smoothness", f"qp {s['qp_mean']:.3g} vs trapezoid {s['trapezoid_mean']:.3g}, "
                                      f"qp dominates all: {s['qp_dominates_all']}"))
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_plan(args) -> int:
    desc = _description(args.robot)
    state, q_file = read_ball_state(args.ball)
    q0 = q_file if q_file is not None else np.asarray(load_preset("experiment_b").q_inits[0], dtype=float)
    if args.q0:
        q0 = np.asarray([float(x) for x in args.q0.split(",")])
        if q0.shape != (N_JOINTS,):
            raise CliError(EXIT_CONFIG, "--q0 needs 8 comma-separated values")
    qd0 = np.zeros(N_JOINTS)
    try:
        pcfg = PlannerConfig(low_level=args.low_level or "qp")
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    t0 = state.t
    start = time.perf_counter()
    pred = predict(DragModel(K_D=args.kd), state, args.horizon)
    t_pred = time.perf_counter()
    try:
        goal = plan_catch(desc, pcfg, q0, qd0, pred, t0)
        t_high = time.perf_counter()
        traj = plan_path(desc, pcfg, q0, qd0, goal, t0)
    except PlanningError as exc:
        print(f"no feasible catch: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    t_low = time.perf_counter()
    timings = {"prediction": t_pred - start, "high_level": t_high - t_pred, "low_level": t_low - t_high}
    doc = plan_to_dict(goal, traj, timings)
    doc["planner"] = dataclasses.asdict(pcfg)
    out = _out_dir(args.out or "plan_out")
    try:
        (out / "plan.json").write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    write_manifest(out, "plan", {"planner": doc["planner"], "ball": {"b": state.b.tolist(),
                                 "b_dot": state.b_dot.tolist(), "t": state.t}, "q0": q0.tolist(), "K_D": args.kd},
                   None, sys.argv[1:] if args.argv is None else args.argv)
    print(f"catch at t_f = {goal.t_f:.4f} s, cost {goal.cost:.4g}, {traj.K} waypoints ({pcfg.low_level})")
    print("timings [ms]: " + ", ".join(f"{k} {1e3 * v:.2f}" for k, v in timings.items()))
    if goal.report is not None:
        print(f"high-level KKT residual {goal.report.kkt_residual:.2e} ({goal.report.iterations} SQP iterations)")
    if traj.reports:
        print("low-level KKT residuals: " + " ".join(f"{r.kkt_residual:.1e}" for r in traj.reports))
    print(f"wrote {out / 'plan.json'}")
    return EXIT_OK


def _synthetic_tosses(n, seed, noise, rate, duration):
    model = DragModel()
    region = OriginRegion((3.0, 0.0), 0.5, 1.0, 1.6)
    tosses = []
    for i in range(n):
        ss = np.random.SeedSequence([seed, i])
        rng = np.random.default_rng(ss)
        target = np.array([0.7, 0.0, 1.2]) + rng.uniform(-0.3, 0.3, 3)
        s0 = synthesize_throw(ss.spawn(1)[0], target, rng.uniform(0.6, 0.9), region, model)
        tosses.append(simulate_toss(model, s0, duration, rate, noise, rng))
    return tosses


def cmd_estimate_drag(args) -> int:
    out = _out_dir(args.out or "drag_out")
    paths = []
    for p in args.tosses:
        p = Path(p)
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    if args.synthetic:
        toss_dir = _out_dir(out / "tosses")
        for i, toss in enumerate(_synthetic_tosses(args.synthetic, args.seed or 0, args.noise, args.rate,
                                                   args.duration)):
            path = toss_dir / f"toss_{i:03d}.csv"
            write_toss_csv(path, toss)
            paths.append(path)
    if not paths:
        raise CliError(EXIT_CONFIG, "no toss CSVs given (pass files, a directory or --synthetic N)")
    try:
        tosses = [read_toss_csv(p) for p in paths]
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"toss CSV: {exc}") from None
    try:
        model = estimate_drag(tosses, forgetting=args.forgetting)
    except IdentifiabilityError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    doc = {"schema": DRAG_SCHEMA, "version": 1, "K_D": model.K_D, "g": model.g, "n_tosses": len(tosses)}
    (out / "drag_model.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_manifest(out, "estimate-drag", {"inputs": [str(p) for p in paths], "forgetting": args.forgetting,
                                          "synthetic": args.synthetic, "noise": args.noise, "rate": args.rate,
                                          "duration": args.duration}, args.seed,
                   sys.argv[1:] if args.argv is None else args.argv)
    print(f"K_D = {model.K_D:.6f} from {len(tosses)} tosses; wrote {out / 'drag_model.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    desc = _description(args.robot)
    out = _out_dir(args.out or "model_out")
    seed = args.seed or 0
    plant = PlantConfig.default(desc)
    opts = TrainOptions(epochs=args.epochs, seed=seed)
    try:
        data = collect_dataset(plant, desc, seed=seed, n_trajectories=args.trajectories)
        model, report = train(data, opts)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        save_model(out / "model.npz", model)
        for j in range(N_JOINTS):
            save_model(out / f"joint_{j}.npz", model, joints=[j])
        with open(out / "loss_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["joint", "epoch", "train_loss", "val_loss"])
            for j, (tr, va) in enumerate(zip(report.train_loss, report.val_loss)):
                for e, (a, b) in enumerate(zip(tr, va), start=1):
                    w.writerow([j, e, repr(float(a)), repr(float(b))])
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    write_manifest(out, "train", {"plant": dataclasses.asdict(plant), "train": dataclasses.asdict(opts),
                                  "trajectories": args.trajectories}, seed,
                   sys.argv[1:] if args.argv is None else args.argv)
    print("final validation loss per joint: " + " ".join(f"{v:.4f}" for v in report.final_val()))
    base, shaped = held_out_rmse(plant, desc, model, seed=seed + 1000)
    red = 1.0 - shaped.mean(axis=0) / base.mean(axis=0)
    print("held-out RMSE reduction per joint: " + " ".join(f"{100 * r:.0f}%" for r in red))
    print(f"wrote {out / 'model.npz'}, per-joint files and loss_curves.csv")
    return EXIT_OK


def validate_plan_doc(doc: dict, desc) -> list[str]:
    """All plan invariants: recursion, boundary states, boxes, catch constraints, solver residuals."""
    goal, traj = plan_from_dict(doc)
    pcfg = PlannerConfig(**doc["planner"]) if "planner" in doc else PlannerConfig()
    problems = validate_trajectory(desc, traj, q_f=goal.q_f)
    problems += check_goal(desc, pcfg, traj.q[0], traj.qd[0], traj.t0, goal)
    if abs(traj.t_end - goal.t_f) > traj.gamma + 1e-9:
        problems.append(f"trajectory ends at {traj.t_end:.4f}, catch at {goal.t_f:.4f}")
    for i, r in enumerate(doc.get("reports", {}).get("low_level") or []):
        if r["status"] != "optimal" or r["kkt_residual"] > 1e-6:
            problems.append(f"joint {i} QP status {r['status']} residual {r['kkt_residual']:.2e}")
    return problems


def cmd_validate(args) -> int:
    desc = _description(args.robot)
    try:
        doc = json.loads(Path(args.plan).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"plan file not found: {args.plan}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{args.plan}: invalid JSON ({exc})") from None
    try:
        problems = validate_plan_doc(doc, desc)
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise CliError(EXIT_CONFIG, f"{args.plan}: schema violation ({exc})") from None
    if problems:
        for p in problems:
            print(f"violation: {p}")
        return EXIT_INVALID
    print(f"{args.plan}: ok")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ballcatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ballcatch {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", help="output directory")
        p.add_argument("--robot", help="robot description TOML (default: bundled)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="run a scenario preset or config file")
    common(p)
    p.add_argument("--preset", help="bundled preset name; $BALLCATCH_CONFIG_ROOT/<name>.toml takes precedence")
    p.add_argument("--config", help="scenario TOML file")
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    p.add_argument("--learning", choices=("on", "off"))
    p.add_argument("--low-level", choices=("qp", "trapezoid"))
    p.add_argument("--n-throws", type=int)
    p.add_argument("--model", help="pre-shaping model file from `train`")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="plan one catch from a ball state file")
    common(p, seed=False)
    p.add_argument("--ball", help="ball state JSON (default: bundled example)")
    p.add_argument("--q0", help="initial joints, 8 comma-separated values")
    p.add_argument("--low-level", choices=("qp", "trapezoid"))
    p.add_argument("--kd", type=float, default=DragModel().K_D)
    p.add_argument("--horizon", type=float, default=1.2)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("estimate-drag", help="fit K_D to recorded tosses")
    common(p)
    p.add_argument("tosses", nargs="*", help="toss CSV files or directories")
    p.add_argument("--synthetic", type=int, default=0, help="generate N simulated tosses first")
    p.add_argument("--noise", type=float, default=0.0, help="velocity noise std for --synthetic [m/s]")
    p.add_argument("--rate", type=float, default=100.0)
    p.add_argument("--duration", type=float, default=0.6)
    p.add_argument("--forgetting", type=float, default=1.0)
    p.set_defaults(func=cmd_estimate_drag)

    p = sub.add_parser("train", help="train the pre-shaping networks on the simulated plant")
    common(p)
    p.add_argument("--trajectories", type=int, default=8)
    p.add_argument("--epochs", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("validate", help="re-check a plan dump against all invariants")
    p.add_argument("plan")
    p.add_argument("--robot")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
