"""Seeded Monte-Carlo catching experiments.

Each episode draws its own random streams from ``SeedSequence([seed, index, k])``
so results do not depend on which other episodes run, or in which process.
Time is kept as integer milliseconds: ball truth and measurements live on the
1 ms clock, the joint controller runs every ``control_ms`` and the planner
every ``replan_period``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .ballistics import BallState, DragModel, OriginRegion, ThrowError, predict, query_batch, synthesize_throw
from .estimation import BallTracker, NoiseConfig
from .planner import (PlannerConfig, PlannerSession, PlanningError, plan_catch, plan_path,
                      plan_path_trapezoid)
from .robot_model import N_JOINTS, RobotDescription, fk_batch
from .tracking import MlpModel, PlantConfig, PlantState, collect_dataset, plant_step, preshape, train

CONFIG_ROOT_ENV = "BALLCATCH_CONFIG_ROOT"
SCENARIO_VERSION = 1
PRESETS = ("feasibility_2560", "experiment_a", "experiment_b", "experiment_c")
CAUSES = ("none", "no_feasible_catch", "tracking_error", "prediction_error")

# Ready pose: gripper 0.75 m ahead of the base at 1.25 m, pointing forward and 25 deg up.
HOME_Q = (0.314, -1.575, -1.823, 0.712, 1.288, 0.0, 0.0, 0.0)


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    name: str = "custom"
    seed: int = 0
    n_throws: int = 100
    mode: str = "closed_loop"  # or "planning": high/low level only, no tracking
    origin_centers: list = field(default_factory=lambda: [[3.0, 0.0]])
    origin_radius: float = 0.5
    origin_z: list = field(default_factory=lambda: [1.0, 1.6])
    q_inits: list = field(default_factory=lambda: [list(HOME_Q)])
    flight_time: float = 0.7
    target_diameter: float = 0.25
    replan_period: float = 0.1
    first_replan: float = 0.05
    measurement_rate: float = 100.0
    sigma_meas: float = 0.002
    sigma_accel: float = 0.5
    catch_radius: float = 0.01657
    cone_deg: float = 20.0
    score_window: float = 0.05
    learning: bool = True
    low_level: str = "qp"
    compare_low_level: bool = False
    drag_truth: float = 0.0238
    drag_model: float = 0.0238
    training_seed: int = 0
    training_trajectories: int = 8
    model_path: str = ""

    def __post_init__(self):
        if self.mode not in ("closed_loop", "planning"):
            raise ConfigError(f"mode must be closed_loop or planning, got {self.mode!r}")
        if self.low_level not in ("qp", "trapezoid"):
            raise ConfigError(f"low_level must be qp or trapezoid, got {self.low_level!r}")
        if self.n_throws < 0:
            raise ConfigError("n_throws must be >= 0")
        for key in ("flight_time", "target_diameter", "replan_period", "measurement_rate",
                    "catch_radius", "cone_deg", "score_window"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.origin_radius < 0:
            raise ConfigError("origin_radius must be >= 0")
        if not self.origin_centers or any(len(c) != 2 for c in self.origin_centers):
            raise ConfigError("origin_centers must be a non-empty list of [x, y]")
        if not self.q_inits or any(len(q) != N_JOINTS for q in self.q_inits):
            raise ConfigError("q_inits must be a non-empty list of 8-vectors")
        if len(self.origin_z) != 2 or self.origin_z[0] > self.origin_z[1]:
            raise ConfigError("origin_z must be [z_min, z_max]")
        if not float(1000 * self.replan_period).is_integer() or not float(1000 * self.first_replan).is_integer():
            raise ConfigError("replan times must be whole milliseconds")
        if not float(1000 / self.measurement_rate).is_integer():
            raise ConfigError("measurement period must be whole milliseconds")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    doc = dict(doc)
    version = doc.pop("format_version", SCENARIO_VERSION)
    if version != SCENARIO_VERSION:
        raise ConfigError(f"unsupported scenario format_version {version!r}")
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
    try:
        return ScenarioConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    try:
        return scenario_from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_preset(name: str) -> ScenarioConfig:
    """Preset by name; ``$BALLCATCH_CONFIG_ROOT/<name>.toml`` overrides the bundled one."""
    root = os.environ.get(CONFIG_ROOT_ENV)
    if root:
        candidate = Path(root) / f"{name}.toml"
        if candidate.exists():
            return load_scenario(candidate)
    res = resources.files("ballcatch.data.presets").joinpath(f"{name}.toml")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return scenario_from_dict(tomllib.loads(res.read_text()))


# -- throws ---------------------------------------------------------------

def episode_setup(cfg: ScenarioConfig, index: int) -> tuple[np.ndarray, OriginRegion]:
    """Initial configuration and origin region used by episode ``index``."""
    n_orig = len(cfg.origin_centers)
    combo = index % (n_orig * len(cfg.q_inits))
    q_init = np.asarray(cfg.q_inits[combo // n_orig], dtype=float)
    cx, cy = cfg.origin_centers[combo % n_orig]
    region = OriginRegion((float(cx), float(cy)), cfg.origin_radius, cfg.origin_z[0], cfg.origin_z[1])
    return q_init, region


def sample_throw(cfg: ScenarioConfig, desc: RobotDescription, index: int, max_attempts: int = 10):
    """One throw whose drag-aware flight reaches the target sphere at ``flight_time``.

    Returns ``(state, q_init, target)``. The target is uniform in the sphere
    around the end effector at ``q_init``.
    """
    q_init, region = episode_setup(cfg, index)
    centre = fk_batch(desc, q_init)[0][0]
    model = DragModel(K_D=cfg.drag_truth)
    for attempt in range(max_attempts):
        ss = np.random.SeedSequence([cfg.seed, index, 0, attempt])
        rng = np.random.default_rng(ss)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        target = centre + 0.5 * cfg.target_diameter * rng.uniform() ** (1.0 / 3.0) * u
        try:
            s0 = synthesize_throw(ss.spawn(1)[0], target, cfg.flight_time, region, model)
        except ThrowError:
            continue
        return s0, q_init, target
    raise ThrowError(f"episode {index}: no throw found in {max_attempts} attempts")


def sample_throws(cfg: ScenarioConfig, desc: RobotDescription) -> list[BallState]:
    return [sample_throw(cfg, desc, i)[0] for i in range(cfg.n_throws)]


# -- episodes -------------------------------------------------------------

@dataclass
class EpisodeResult:
    index: int
    caught: bool
    cause: str
    miss_distance: float
    miss_angle: float
    t_f: float
    n_replans: int
    n_failed_replans: int
    rmse_x: float
    rmse_y: float
    rmse_z: float
    smooth_qp: float = float("nan")
    smooth_trapezoid: float = float("nan")
    latency_mean: float = 0.0
    latency_max: float = 0.0
    latencies: list = field(default_factory=list, repr=False)
    trace: dict | None = field(default=None, repr=False)

    # Wall-clock fields vary run to run and stay out of the CSV.
    CSV_FIELDS = ("index", "caught", "cause", "miss_distance", "miss_angle", "t_f", "n_replans",
                  "n_failed_replans", "rmse_x", "rmse_y", "rmse_z", "smooth_qp", "smooth_trapezoid")


def _angle_deg(z, v) -> float:
    n = np.linalg.norm(v)
    if n == 0:
        return 180.0
    c = float(np.clip(-(z @ v) / n, -1.0, 1.0))
    return math.degrees(math.acos(c))


def closest_approach(desc: RobotDescription, t_grid, Q, truth, t_f: float, window: float):
    """Minimum end-effector to ball distance within ``t_f +- window``.

    ``Q`` holds joint positions at ``t_grid``; they are interpolated linearly
    onto a 1 ms grid (exact for the plant, which moves at constant velocity
    within a control step). Returns ``(distance, angle_deg, t_min)``.
    """
    ts = np.round(np.arange(t_f - window, t_f + window + 5e-4, 1e-3), 6)
    ts = ts[(ts >= t_grid[0]) & (ts <= t_grid[-1])]
    if ts.size == 0:
        return float("inf"), 180.0, float("nan")
    Qi = np.column_stack([np.interp(ts, t_grid, Q[:, j]) for j in range(Q.shape[1])])
    p, z, _ = fk_batch(desc, Qi)
    b, v = query_batch(truth, ts)
    dist = np.linalg.norm(p - b, axis=1)
    i = int(np.argmin(dist))
    return float(dist[i]), _angle_deg(z[i], v[i]), float(ts[i])


def score(cfg: ScenarioConfig, distance: float, angle: float) -> bool:
    return bool(distance <= cfg.catch_radius and angle <= cfg.cone_deg)


def _classify(cfg, desc, caught, goal, truth) -> str:
    if caught:
        return "none"
    if goal is None:
        return "no_feasible_catch"
    p, z, _ = fk_batch(desc, goal.q_f)
    b, v = query_batch(truth, [goal.t_f])
    if not score(cfg, float(np.linalg.norm(p[0] - b[0])), _angle_deg(z[0], v[0])):
        return "prediction_error"
    return "tracking_error"


def _planner_config(cfg: ScenarioConfig) -> PlannerConfig:
    return PlannerConfig(low_level=cfg.low_level)


def _planning_episode(cfg, desc, index, s0, q_init) -> EpisodeResult:
    truth = predict(DragModel(K_D=cfg.drag_truth), s0, cfg.flight_time + 0.5)
    pcfg = _planner_config(cfg)
    qd0 = np.zeros(N_JOINTS)
    start = time.perf_counter()
    goal, traj = None, None
    try:
        goal = plan_catch(desc, pcfg, q_init, qd0, truth, 0.0)
        traj = plan_path(desc, pcfg, q_init, qd0, goal, 0.0)
    except PlanningError:
        goal = None
    lat = time.perf_counter() - start
    nan = float("nan")
    if goal is None:
        return EpisodeResult(index, False, "no_feasible_catch", nan, nan, nan, 1, 1, nan, nan, nan,
                             latency_mean=lat, latency_max=lat, latencies=[lat])
    p, z, _ = fk_batch(desc, traj.q[-1])
    b, v = query_batch(truth, [goal.t_f])
    dist, ang = float(np.linalg.norm(p[0] - b[0])), _angle_deg(z[0], v[0])
    caught = score(cfg, dist, ang)
    return EpisodeResult(index, caught, _classify(cfg, desc, caught, goal, truth), dist, ang, goal.t_f,
                         1, 0, nan, nan, nan, latency_mean=lat, latency_max=lat, latencies=[lat])


def run_episode(cfg: ScenarioConfig, desc: RobotDescription, index: int, model: MlpModel | None = None,
                plant: PlantConfig | None = None, throw=None, keep_trace: bool = False) -> EpisodeResult:
    """Simulate one throw end to end; failures are reported through ``cause``.

    ``throw`` may be given as ``(state, q_init)``; otherwise it is sampled.
    With ``keep_trace`` the result carries the logged joint positions, the
    final goal and the true ball flight, enough to re-score the episode.
    """
    if throw is None:
        s0, q_init, _ = sample_throw(cfg, desc, index)
    else:
        s0, q_init = throw[0], np.asarray(throw[1], dtype=float)
    if cfg.mode == "planning":
        return _planning_episode(cfg, desc, index, s0, q_init)
    if cfg.learning and model is None:
        raise ValueError("learning is on but no model was given")

    plant = plant or PlantConfig.default(desc)
    control_ms = int(round(plant.dt * 1000))
    if abs(control_ms - plant.dt * 1000) > 1e-9:
        raise ConfigError("plant control step must be whole milliseconds")
    meas_ms = int(round(1000 / cfg.measurement_rate))
    replan_ms = int(round(1000 * cfg.replan_period))
    first_ms = int(round(1000 * cfg.first_replan))
    horizon_end = cfg.flight_time + 0.5
    end_ms = int(round(1000 * horizon_end))

    truth = predict(DragModel(K_D=cfg.drag_truth), s0, horizon_end + 0.1)
    truth_pos = truth.pos  # 1 ms grid starting at t = 0
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 1]))
    est_model = DragModel(K_D=cfg.drag_model)
    tracker = BallTracker(est_model, NoiseConfig.default(1.0 / cfg.measurement_rate, cfg.sigma_accel,
                                                         cfg.sigma_meas), cfg.sigma_accel)
    pcfg = _planner_config(cfg)
    session = PlannerSession(desc, pcfg, q_init, 0.0)
    state = PlantState.at_rest(plant, q_init)
    look = plant.relative_degree if model is None else model.lookahead
    look_dt = look * plant.dt
    cols = np.arange(N_JOINTS)

    t_log, q_log, qd_log = [0.0], [state.q.copy()], [q_init.copy()]
    smooth_qp = smooth_trap = 0.0
    compared = False
    for ms in range(0, end_ms + 1):
        t = ms / 1000.0
        goal = session.goal
        if goal is not None and t > goal.t_f + cfg.score_window:
            break
        if ms % meas_ms == 0:
            z = truth_pos[ms] + rng.normal(0.0, cfg.sigma_meas, 3)
            tracker.step(z, t)
        if ms >= first_ms and (ms - first_ms) % replan_ms == 0 and tracker.state is not None \
                and not session.locked(t):
            pred = predict(est_model, tracker.state.ball_state(), max(horizon_end - tracker.state.t, 0.1))
            # replans start from the reference, which keeps the commanded path continuous
            q_ref, qd_ref, _ = session.trajectory.sample(t)
            before = session.goal
            traj = session.replan(pred, q_ref, qd_ref, t)
            if cfg.compare_low_level and not session.failed and session.goal is not before:
                other = (plan_path_trapezoid(desc, pcfg, q_ref, qd_ref, session.goal, t)
                         if cfg.low_level == "qp" else
                         plan_path(desc, dataclasses.replace(pcfg, low_level="qp"), q_ref, qd_ref,
                                   session.goal, t))
                qp_traj, tz_traj = (traj, other) if cfg.low_level == "qp" else (other, traj)
                smooth_qp += float(qp_traj.smoothness().sum())
                smooth_trap += float(tz_traj.smoothness().sum())
                compared = True
        if ms % control_ms == 0 and ms + control_ms <= end_ms:
            traj = session.trajectory
            t_next = t + plant.dt
            y_next = traj.sample_many([t_next])[0]
            if model is not None and cfg.learning:
                fut = traj.sample_many(t + look_dt)[cols, cols]
                y_cmd = preshape(model, state.q, fut, y_next, plant.q_max)
            else:
                y_cmd = y_next
            state, q_meas = plant_step(plant, state, y_cmd)
            t_log.append(t_next)
            q_log.append(q_meas.copy())
            qd_log.append(y_next)

    t_grid = np.array(t_log)
    Q = np.array(q_log)
    goal = session.goal
    nan = float("nan")
    if goal is not None:
        dist, ang, _ = closest_approach(desc, t_grid, Q, truth, goal.t_f, cfg.score_window)
        upto = t_grid <= goal.t_f + 1e-9
    else:
        dist, ang, _ = closest_approach(desc, t_grid, Q, truth, cfg.flight_time, cfg.score_window)
        upto = t_grid <= cfg.flight_time + 1e-9
    caught = goal is not None and score(cfg, dist, ang)
    p_act = fk_batch(desc, Q[upto])[0]
    p_des = fk_batch(desc, np.array(qd_log)[upto])[0]
    rmse = np.sqrt(np.mean((p_act - p_des) ** 2, axis=0))
    lat = session.latencies
    return EpisodeResult(
        index=index, caught=caught, cause=_classify(cfg, desc, caught, goal, truth),
        miss_distance=dist, miss_angle=ang, t_f=goal.t_f if goal is not None else nan,
        n_replans=session.n_replans, n_failed_replans=len(session.failures),
        rmse_x=float(rmse[0]), rmse_y=float(rmse[1]), rmse_z=float(rmse[2]),
        smooth_qp=smooth_qp if compared else nan, smooth_trapezoid=smooth_trap if compared else nan,
        latency_mean=float(np.mean(lat)) if lat else 0.0, latency_max=float(np.max(lat)) if lat else 0.0,
        latencies=list(lat),
        trace={"t": t_grid, "q": Q, "q_ref": np.array(qd_log), "goal": goal, "truth": truth}
        if keep_trace else None)


# -- experiments ------------------------------------------------------------

_MODEL_CACHE: dict = {}


def default_model(desc: RobotDescription, seed: int = 0, n_trajectories: int = 8,
                  plant: PlantConfig | None = None) -> MlpModel:
    """Train (once per process) the pre-shaping model used when none is supplied."""
    key = (id(desc), seed, n_trajectories)
    if key not in _MODEL_CACHE:
        plant = plant or PlantConfig.default(desc)
        data = collect_dataset(plant, desc, seed=seed, n_trajectories=n_trajectories)
        _MODEL_CACHE[key] = train(data)[0]
    return _MODEL_CACHE[key]


def resolve_model(cfg: ScenarioConfig, desc: RobotDescription) -> MlpModel | None:
    if cfg.mode == "planning" or not cfg.learning:
        return None
    if cfg.model_path:
        from .tracking import load_model
        return load_model(cfg.model_path)
    return default_model(desc, cfg.training_seed, cfg.training_trajectories)


def _run_chunk(args):
    cfg, desc, model, indices = args
    return [run_episode(cfg, desc, i, model) for i in indices]


def run_episodes(cfg: ScenarioConfig, desc: RobotDescription, model: MlpModel | None = None,
                 jobs: int = 1, indices=None) -> list[EpisodeResult]:
    indices = list(range(cfg.n_throws)) if indices is None else list(indices)
    if jobs <= 1 or len(indices) < 2:
        return [run_episode(cfg, desc, i, model) for i in indices]
    chunks = [indices[k::jobs] for k in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_run_chunk, [(cfg, desc, model, c) for c in chunks if c]))
    results = [r for part in parts for r in part]
    return sorted(results, key=lambda r: r.index)


def _percentiles(x) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"count": 0, "mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0}
    return {"count": int(x.size), "mean": float(x.mean()), "p50": float(np.percentile(x, 50)),
            "p95": float(np.percentile(x, 95)), "max": float(x.max())}


def aggregate(cfg: ScenarioConfig, results: list[EpisodeResult]) -> dict:
    """Order-independent summary of a set of episodes."""
    results = sorted(results, key=lambda r: r.index)
    n = len(results)
    caught = sum(r.caught for r in results)
    feasible = sum(r.cause != "no_feasible_catch" for r in results)
    hist = {c: sum(r.cause == c for r in results) for c in CAUSES}
    lat = [x for r in results for x in r.latencies]

    def mean_of(key):
        vals = [getattr(r, key) for r in results if np.isfinite(getattr(r, key))]
        return float(np.mean(vals)) if vals else None

    compared = [r for r in results if np.isfinite(r.smooth_qp) and np.isfinite(r.smooth_trapezoid)]
    return {
        "scenario": cfg.name,
        "mode": cfg.mode,
        "n_episodes": n,
        "success_rate": caught / n if n else 0.0,
        "n_caught": caught,
        "feasibility_rate": feasible / n if n else 0.0,
        "failure_causes": hist,
        "tracking_rmse": {"x": mean_of("rmse_x"), "y": mean_of("rmse_y"), "z": mean_of("rmse_z")},
        "latency": _percentiles(lat),
        "smoothness": {
            "n_compared": len(compared),
            "qp_dominates_all": all(r.smooth_qp <= r.smooth_trapezoid + 1e-9 for r in compared),
            "qp_mean": float(np.mean([r.smooth_qp for r in compared])) if compared else None,
            "trapezoid_mean": float(np.mean([r.smooth_trapezoid for r in compared])) if compared else None,
        },
    }


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if not math.isfinite(v) else repr(v)
    return str(v)


def episodes_csv(results: list[EpisodeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EpisodeResult.CSV_FIELDS)
    for r in sorted(results, key=lambda r: r.index):
        w.writerow([_fmt(getattr(r, k)) for k in EpisodeResult.CSV_FIELDS])
    return buf.getvalue()


def run_experiment(cfg: ScenarioConfig, desc: RobotDescription, jobs: int = 1, out_dir: str | Path | None = None,
                   model: MlpModel | None = None) -> dict:
    """Run all episodes, aggregate, and optionally write ``report.json`` and ``episodes.csv``."""
    start = time.perf_counter()
    if model is None:
        model = resolve_model(cfg, desc)
    results = run_episodes(cfg, desc, model, jobs)
    report = aggregate(cfg, results)
    report["wall_time"] = time.perf_counter() - start
    report["config"] = cfg.to_dict()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "episodes.csv").write_text(episodes_csv(results))
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    report["episodes"] = results
    return report
