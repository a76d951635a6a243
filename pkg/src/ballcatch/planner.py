"""Bi-level catch planner.

The high level picks the catch configuration and time with SQP; the low level
generates per-joint waypoints on a fixed grid by solving one small QP per joint
(double-integrator model, states condensed out). A trapezoidal-velocity
baseline is available as an alternative low level.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ballistics import BallPrediction, BallState, query_arrays, query_batch
from .optim import NlpProblem, QpProblem, SolveReport, SqpOptions, solve_qp, solve_sqp
from .robot_model import N_ARM, N_JOINTS, RobotDescription, cylinder_contains, fk_batch

PLAN_SCHEMA = "ballcatch.plan"
PLAN_VERSION = 1


class PlanningError(RuntimeError):
    """Planning failed; ``cause`` is a short machine-readable tag."""

    def __init__(self, cause: str, message: str = "", joint: int | None = None):
        super().__init__(message or cause)
        self.cause = cause
        self.joint = joint


@dataclass
class PlannerConfig:
    w_a: float = 1.0
    w_b: float = 5.0
    lam: float = 0.4
    t_f_guess: float = 0.5
    gamma: float = 0.05
    t_f_min: float = 0.1
    align_deg: float = 5.0
    lock_window: float = 0.2
    retry_t_f: float = 0.7
    low_level: str = "qp"
    sqp_tol: float = 1e-6
    sqp_step_tol: float = 1e-6
    sqp_max_iter: int = 100
    sqp_max_elastic: int = 2
    retry_infeasible: bool = False

    def __post_init__(self):
        if not (self.w_a > 0 and self.w_b > 0):
            raise ValueError("cost weights must be positive")
        if not 0 < self.lam < 1:
            raise ValueError("lam must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.low_level not in ("qp", "trapezoid"):
            raise ValueError(f"unknown low-level planner {self.low_level!r}")


@dataclass
class CatchGoal:
    q_f: np.ndarray
    t_f: float
    ball_at_catch: BallState
    cost: float
    report: SolveReport | None = None


@dataclass
class JointTrajectory:
    """Waypoints on ``t0 + k * gamma``: ``q``/``qd`` are ``(K+1, 8)``, ``u`` is ``(K, 8)``."""

    t0: float
    gamma: float
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    reports: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.u)

    @property
    def t_end(self) -> float:
        return self.t0 + self.K * self.gamma

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity and acceleration at ``t``; holds the final state after the end."""
        s = (t - self.t0) / self.gamma
        if s <= 0:
            return self.q[0].copy(), self.qd[0].copy(), (self.u[0].copy() if self.K else np.zeros(N_JOINTS))
        if s >= self.K:
            return self.q[-1].copy(), np.zeros(N_JOINTS), np.zeros(N_JOINTS)
        k = int(s)
        tau = (s - k) * self.gamma
        u = self.u[k]
        return (self.q[k] + self.qd[k] * tau + 0.5 * u * tau * tau, self.qd[k] + u * tau, u.copy())

    def sample_many(self, ts) -> np.ndarray:
        """Positions at each time in ``ts``, shape ``(len(ts), 8)``."""
        s = (np.asarray(ts, dtype=float) - self.t0) / self.gamma
        k = np.clip(np.floor(s).astype(int), 0, max(self.K - 1, 0))
        tau = (np.clip(s, 0.0, self.K) - k)[:, None] * self.gamma
        out = self.q[k] + self.qd[k] * tau + 0.5 * self.u[k] * tau * tau
        out[s >= self.K] = self.q[-1]
        return out

    def smoothness(self) -> np.ndarray:
        """Per-joint low-level cost: sum of squared control differences."""
        if self.K < 2:
            return np.zeros(self.q.shape[1])
        return np.sum(np.diff(self.u, axis=0) ** 2, axis=0)

    def max_jerk_step(self) -> np.ndarray:
        if self.K < 2:
            return np.zeros(self.q.shape[1])
        return np.max(np.abs(np.diff(self.u, axis=0)), axis=0)


def hold_trajectory(q, t0: float, gamma: float) -> JointTrajectory:
    q = np.asarray(q, dtype=float)
    return JointTrajectory(t0, gamma, np.vstack([q, q]), np.zeros((2, q.size)), np.zeros((1, q.size)))


# -- high level ------------------------------------------------------------

def reach_bound(desc: RobotDescription, qd0, dt, lam: float) -> np.ndarray:
    """Per-joint reachable displacement under a trapezoidal profile, scaled by ``lam``.

    ``dt`` may be a scalar or an array (broadcast against joints on the last axis).
    """
    vmax, amax = desc.v_max, desc.a_max
    qd0 = np.asarray(qd0, dtype=float)
    dt = np.asarray(dt, dtype=float)[..., None] if np.ndim(dt) else float(dt)
    val = vmax * (dt - (vmax - qd0) / amax) + (vmax ** 2 - qd0 ** 2) / (2 * amax)
    return np.maximum(lam * val, 0.0)


def reach_bounds(desc: RobotDescription, qd0, dt, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Reach in the positive and negative direction of each joint.

    The initial velocity helps in the direction it points and hurts in the
    other; at rest both sides equal ``reach_bound``.
    """
    qd0 = np.asarray(qd0, dtype=float)
    return reach_bound(desc, qd0, dt, lam), reach_bound(desc, -qd0, dt, lam)


def _alignment(z, v):
    """Cosine between the end-effector axis and the incoming direction ``-v``."""
    speed = np.linalg.norm(v, axis=-1)
    return -np.sum(z * v, axis=-1) / np.maximum(speed, 1e-12)


class _CatchProblem:
    def __init__(self, desc, cfg, q0, qd0, pred, t0):
        self.desc, self.cfg, self.pred = desc, cfg, pred
        self.q0 = np.asarray(q0, float)
        self.qd0 = np.asarray(qd0, float)
        self.t0 = float(t0)
        self.cos_align = math.cos(math.radians(cfg.align_deg))
        self.w = np.r_[np.full(N_ARM, cfg.w_a), np.full(N_JOINTS - N_ARM, cfg.w_b)]

    def batch(self, X):
        d = self.desc
        q, tf = X[:, :N_JOINTS], X[:, N_JOINTS]
        p_w, z_w, p_a = fk_batch(d, q)
        b, v = query_batch(self.pred, tf)
        f = np.sum(self.w * (q - self.q0) ** 2, axis=1)
        ce = p_w - b
        up, down = reach_bounds(d, self.qd0, tf - self.t0, self.cfg.lam)
        ci = np.column_stack([
            self.cos_align - _alignment(z_w, v),
            p_a[:, 0] ** 2 + p_a[:, 1] ** 2 - d.R_coll ** 2,
            -p_a[:, 2],
            p_a[:, 2] - d.H_coll,
            (q - self.q0) - up,
            (self.q0 - q) - down,
        ])
        return f, ce, ci

    def nlp(self, x0, lb_t, ub_t):
        lb = np.r_[self.desc.q_min, lb_t]
        ub = np.r_[self.desc.q_max, ub_t]
        return NlpProblem(objective=lambda x: self.batch(x[None])[0][0], x0=np.clip(x0, lb, ub),
                          eq=lambda x: self.batch(x[None])[1][0],
                          ineq=lambda x: self.batch(x[None])[2][0], lb=lb, ub=ub, batch=self.batch)


def check_goal(desc: RobotDescription, cfg: PlannerConfig, q0, qd0, t0: float, goal: CatchGoal,
               pos_tol: float = 1e-3, align_slack: float = 1e-6, reach_slack: float = 1e-6) -> list[str]:
    """Independent constraint check of a catch goal; returns a list of violations."""
    problems = []
    q_f = np.asarray(goal.q_f, float)
    p_w, z_w, p_a = (a[0] for a in fk_batch(desc, q_f))
    b, v = goal.ball_at_catch.b, goal.ball_at_catch.b_dot
    err = float(np.linalg.norm(p_w - b))
    if err > pos_tol:
        problems.append(f"position error {err:.4g} m")
    cosang = float(-z_w @ v / np.linalg.norm(v))
    if cosang < math.cos(math.radians(cfg.align_deg)) - align_slack:
        problems.append(f"alignment {math.degrees(math.acos(min(1, cosang))):.3f} deg")
    if not cylinder_contains(desc, p_a):
        problems.append("collision cylinder")
    if np.any(np.abs(q_f) > desc.q_max + 1e-9):
        problems.append("position limits")
    up, down = reach_bounds(desc, qd0, goal.t_f - t0, cfg.lam)
    step = q_f - np.asarray(q0, dtype=float)
    if np.any(step > up + reach_slack) or np.any(-step > down + reach_slack):
        problems.append("reach bound")
    if goal.t_f <= t0:
        problems.append("catch time not in the future")
    return problems


def plan_catch(desc: RobotDescription, cfg: PlannerConfig, q0, qd0, pred: BallPrediction, t0: float,
               warm: CatchGoal | None = None) -> CatchGoal:
    """Catch configuration and time minimising weighted joint motion."""
    t_lo = t0 + cfg.t_f_min
    t_hi = pred.t_end - 2 * pred.dt
    if t_hi <= t_lo:
        raise PlanningError("horizon_too_short", f"prediction ends at {pred.t_end:.3f}, need > {t_lo:.3f}")
    prob = _CatchProblem(desc, cfg, q0, qd0, pred, t0)
    opts = SqpOptions(tol=cfg.sqp_tol, step_tol=cfg.sqp_step_tol, max_iter=cfg.sqp_max_iter,
                      max_elastic=cfg.sqp_max_elastic)
    if warm is not None:
        first = (np.r_[warm.q_f, warm.t_f], warm.report.hessian if warm.report is not None else None)
    else:
        first = (np.r_[q0, t0 + cfg.t_f_guess], None)
    starts = [first, (np.r_[q0, t0 + cfg.retry_t_f], None)]
    last = None
    for x0, B0 in starts:
        x0 = x0.copy()
        x0[-1] = min(max(x0[-1], t_lo), t_hi)
        opts.hessian0 = B0
        rep = solve_sqp(prob.nlp(x0, t_lo, t_hi), opts)
        last = rep
        if rep.ok:
            x = rep.x_star
            b, v = query_arrays(pred, float(np.clip(x[-1], pred.t0, pred.t_end)))
            goal = CatchGoal(x[:N_JOINTS].copy(), float(x[-1]), BallState(b, v, float(x[-1])),
                             float(prob.batch(x[None])[0][0]), rep)
            if not check_goal(desc, cfg, q0, qd0, t0, goal):
                return goal
        elif rep.status in ("infeasible", "infeasible_subproblem") and not cfg.retry_infeasible:
            # a second start from another catch time has not rescued these in practice
            break
    raise PlanningError("no_feasible_catch", f"SQP status {last.status}: {last.message}")


# -- low level -------------------------------------------------------------

def condensed_matrices(K: int, gamma: float):
    """Affine maps from controls to states: ``q[1..K] = q0 + k*gamma*qd0 + Mq u``,
    ``qd[1..K] = qd0 + Mv u``."""
    k = np.arange(1, K + 1)[:, None]
    j = np.arange(K)[None, :]
    mask = j < k
    Mq = np.where(mask, gamma ** 2 * (k - j - 0.5), 0.0)
    Mv = np.where(mask, gamma, 0.0)
    return Mq, Mv


def _difference_hessian(K: int) -> np.ndarray:
    D = np.diff(np.eye(K), axis=0)
    return 2.0 * D.T @ D


def joint_qp(q0: float, qd0: float, qf: float, K: int, gamma: float,
             qmax: float, vmax: float, amax: float) -> QpProblem:
    """Single-joint waypoint QP in the control sequence (length K)."""
    Mq, Mv = condensed_matrices(K, gamma)
    kk = np.arange(1, K + 1)
    q_free = q0 + kk * gamma * qd0
    A_eq = np.vstack([Mq[-1], Mv[-1]])
    b_eq = np.array([qf - q_free[-1], -qd0])
    inner = slice(0, K - 1)  # k = 1..K-1; step K is pinned by the equalities
    A_in = np.vstack([Mq[inner], -Mq[inner], Mv[inner], -Mv[inner]])
    b_in = np.concatenate([qmax - q_free[inner], qmax + q_free[inner],
                           np.full(K - 1, vmax - qd0), np.full(K - 1, vmax + qd0)])
    return QpProblem(_difference_hessian(K), np.zeros(K), A_eq, b_eq, np.full(K, -amax), np.full(K, amax),
                     A_in, b_in)


def rollout(q0, qd0, u, gamma: float):
    """Double-integrator recursion; returns ``q`` and ``qd`` of length ``len(u) + 1``."""
    u = np.asarray(u, dtype=float)
    q = np.empty((len(u) + 1,) + u.shape[1:])
    qd = np.empty_like(q)
    q[0], qd[0] = q0, qd0
    for k in range(len(u)):
        q[k + 1] = q[k] + gamma * qd[k] + 0.5 * gamma * gamma * u[k]
        qd[k + 1] = qd[k] + gamma * u[k]
    return q, qd


def horizon_steps(t0: float, t_f: float, gamma: float) -> int:
    return int(math.floor((t_f - t0) / gamma + 1e-9))


def plan_path(desc: RobotDescription, cfg: PlannerConfig, q0, qd0, goal: CatchGoal, t0: float,
              warm: JointTrajectory | None = None) -> JointTrajectory:
    if cfg.low_level == "trapezoid":
        return plan_path_trapezoid(desc, cfg, q0, qd0, goal, t0)
    q0 = np.asarray(q0, float)
    qd0 = np.asarray(qd0, float)
    K = horizon_steps(t0, goal.t_f, cfg.gamma)
    if K < 2:
        raise PlanningError("horizon_too_short", f"K={K} < 2")
    U = np.empty((K, N_JOINTS))
    reports = []
    for i in range(N_JOINTS):
        qp = joint_qp(q0[i], qd0[i], goal.q_f[i], K, cfg.gamma, desc.q_max[i], desc.v_max[i], desc.a_max[i])
        rep = solve_qp(qp, tol=1e-9)
        if not rep.ok:
            raise PlanningError("qp_infeasible", f"joint {i}: {rep.status}", joint=i)
        U[:, i] = rep.x_star
        reports.append(rep)
    q, qd = rollout(q0, qd0, U, cfg.gamma)
    # pin the terminal state exactly; the residual is at solver tolerance
    q[-1], qd[-1] = goal.q_f, 0.0
    return JointTrajectory(t0, cfg.gamma, q, qd, U, reports)


def _trapezoid_controls(q0, v0, dq, K, gamma, vmax, amax):
    """Discrete trapezoid: accelerate at ``amax`` to a cruise speed, hold, brake to rest.

    The cruise speed is solved so the double-integrator rollout lands exactly on
    ``q0 + dq`` at step K with zero velocity.
    """
    T = K * gamma
    grid = gamma * np.arange(K + 1)

    def velocity(vc):
        t1 = abs(vc - v0) / amax
        t3 = abs(vc) / amax
        v = np.where(grid <= t1, v0 + np.sign(vc - v0) * amax * grid, vc)
        ramp = T - t3
        v = np.where(grid >= ramp, vc - np.sign(vc) * amax * (grid - ramp), v)
        v[-1] = 0.0
        return v

    def displacement(vc):
        v = velocity(vc)
        return float(np.sum(0.5 * gamma * (v[1:] + v[:-1]))), v

    if abs(v0) > amax * T:
        return None
    lo = max((v0 - amax * T) / 2, -vmax)
    hi = min((v0 + amax * T) / 2, vmax)
    if lo > hi:
        return None
    d_lo, _ = displacement(lo)
    d_hi, _ = displacement(hi)
    if not d_lo - 1e-12 <= dq <= d_hi + 1e-12:
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d_mid, _ = displacement(mid)
        if d_mid < dq:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    _, v = displacement(0.5 * (lo + hi))
    return np.diff(v) / gamma


def plan_path_trapezoid(desc: RobotDescription, cfg: PlannerConfig, q0, qd0, goal: CatchGoal,
                        t0: float) -> JointTrajectory:
    q0 = np.asarray(q0, float)
    qd0 = np.asarray(qd0, float)
    K = horizon_steps(t0, goal.t_f, cfg.gamma)
    if K < 2:
        raise PlanningError("horizon_too_short", f"K={K} < 2")
    U = np.empty((K, N_JOINTS))
    for i in range(N_JOINTS):
        u = _trapezoid_controls(q0[i], qd0[i], goal.q_f[i] - q0[i], K, cfg.gamma, desc.v_max[i], desc.a_max[i])
        if u is None:
            raise PlanningError("trapezoid_infeasible", f"joint {i}", joint=i)
        U[:, i] = u
    q, qd = rollout(q0, qd0, U, cfg.gamma)
    q[-1], qd[-1] = goal.q_f, 0.0
    return JointTrajectory(t0, cfg.gamma, q, qd, U)


def validate_trajectory(desc: RobotDescription, traj: JointTrajectory, q0=None, qd0=None, q_f=None,
                        tol: float = 1e-8) -> list[str]:
    """Standalone check of recursion consistency, boundary conditions and boxes."""
    problems = []
    g = traj.gamma
    q, qd, u = traj.q, traj.qd, traj.u
    if q.shape != (traj.K + 1, N_JOINTS) or qd.shape != q.shape:
        return [f"bad shapes {q.shape} {qd.shape} {u.shape}"]
    pred_q = q[:-1] + g * qd[:-1] + 0.5 * g * g * u
    pred_v = qd[:-1] + g * u
    if np.max(np.abs(pred_q - q[1:])) > tol:
        problems.append(f"position recursion off by {np.max(np.abs(pred_q - q[1:])):.3g}")
    if np.max(np.abs(pred_v - qd[1:])) > tol:
        problems.append(f"velocity recursion off by {np.max(np.abs(pred_v - qd[1:])):.3g}")
    if q0 is not None and np.max(np.abs(q[0] - q0)) > tol:
        problems.append("initial position")
    if qd0 is not None and np.max(np.abs(qd[0] - qd0)) > tol:
        problems.append("initial velocity")
    if q_f is not None and np.max(np.abs(q[-1] - q_f)) > tol:
        problems.append("final position")
    if np.max(np.abs(qd[-1])) > tol:
        problems.append("final velocity")
    if np.any(np.abs(q[1:]) > desc.q_max + tol):
        problems.append("position box")
    if np.any(np.abs(qd[1:]) > desc.v_max + tol):
        problems.append("velocity box")
    if np.any(np.abs(u) > desc.a_max + tol):
        problems.append("acceleration box")
    return problems


# -- replanning session ----------------------------------------------------

class PlannerSession:
    """Stateful replanning with warm starts; always holds a usable trajectory."""

    def __init__(self, desc: RobotDescription, cfg: PlannerConfig, q_init, t_init: float = 0.0):
        self.desc = desc
        self.cfg = cfg
        self.goal: CatchGoal | None = None
        self.trajectory = hold_trajectory(q_init, t_init, cfg.gamma)
        self.latencies: list[float] = []
        self.failed = False
        self.failures: list[str] = []
        self.n_replans = 0

    def locked(self, t_now: float) -> bool:
        return self.goal is not None and t_now >= self.goal.t_f - self.cfg.lock_window

    def replan(self, pred: BallPrediction, q_now, qd_now, t_now: float) -> JointTrajectory:
        if self.locked(t_now):
            return self.trajectory
        start = time.perf_counter()
        self.failed = False
        try:
            goal = plan_catch(self.desc, self.cfg, q_now, qd_now, pred, t_now, warm=self.goal)
            traj = plan_path(self.desc, self.cfg, q_now, qd_now, goal, t_now)
        except PlanningError as exc:
            self.failed = True
            self.failures.append(exc.cause)
        else:
            self.goal, self.trajectory = goal, traj
        self.latencies.append(time.perf_counter() - start)
        self.n_replans += 1
        return self.trajectory


# -- plan dumps ------------------------------------------------------------

def plan_to_dict(goal: CatchGoal, traj: JointTrajectory, timings: dict | None = None) -> dict:
    return {
        "schema": PLAN_SCHEMA,
        "version": PLAN_VERSION,
        "goal": {
            "q_f": goal.q_f.tolist(), "t_f": goal.t_f, "cost": goal.cost,
            "ball_at_catch": {"b": goal.ball_at_catch.b.tolist(), "b_dot": goal.ball_at_catch.b_dot.tolist(),
                              "t": goal.ball_at_catch.t},
        },
        "trajectory": {"t0": traj.t0, "gamma": traj.gamma, "q": traj.q.tolist(), "qd": traj.qd.tolist(),
                       "u": traj.u.tolist()},
        "reports": {
            "high_level": goal.report.summary() if goal.report is not None else None,
            "low_level": [r.summary() for r in traj.reports],
        },
        "timings": timings or {},
    }


def plan_from_dict(doc: dict) -> tuple[CatchGoal, JointTrajectory]:
    if doc.get("schema") != PLAN_SCHEMA or doc.get("version") != PLAN_VERSION:
        raise ValueError("not a plan dump of a supported version")
    g = doc["goal"]
    bc = g["ball_at_catch"]
    goal = CatchGoal(np.asarray(g["q_f"], float), float(g["t_f"]),
                     BallState(bc["b"], bc["b_dot"], float(bc["t"])), float(g["cost"]))
    tr = doc["trajectory"]
    traj = JointTrajectory(float(tr["t0"]), float(tr["gamma"]), np.asarray(tr["q"], float),
                           np.asarray(tr["qd"], float), np.asarray(tr["u"], float).reshape(-1, N_JOINTS))
    return goal, traj


def save_plan(path: str | Path, goal: CatchGoal, traj: JointTrajectory, timings: dict | None = None) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(goal, traj, timings), indent=1))


def load_plan(path: str | Path) -> tuple[CatchGoal, JointTrajectory]:
    return plan_from_dict(json.loads(Path(path).read_text()))
