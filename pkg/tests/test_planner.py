import numpy as np
import pytest

from ballcatch.ballistics import BallState, DragModel, predict, query_arrays
from ballcatch.harness import HOME_Q, load_preset, sample_throw
from ballcatch.optim import solve_qp
from ballcatch.planner import (CatchGoal, PlannerConfig, PlannerSession, PlanningError, check_goal,
                               condensed_matrices, joint_qp, load_plan, plan_catch, plan_path,
                               plan_path_trapezoid, reach_bound, reach_bounds, rollout, save_plan,
                               validate_trajectory)
from ballcatch.robot_model import fk_batch
from oracles import cvxpy_polished

G = 9.81
CFG = PlannerConfig()
ZERO = np.zeros(8)


@pytest.fixture(scope="module")
def sweep(desc):
    """Plans from rest for 500 throws of the feasibility scenario."""
    scen = load_preset("feasibility_2560")
    out = []
    for i in range(500):
        s0, q0, _ = sample_throw(scen, desc, i)
        pred = predict(DragModel(scen.drag_truth), s0, 1.2)
        try:
            goal = plan_catch(desc, CFG, q0, ZERO, pred, 0.0)
        except PlanningError:
            out.append((s0, q0, pred, None, None))
            continue
        try:
            traj = plan_path(desc, CFG, q0, ZERO, goal, 0.0)
        except PlanningError:
            traj = None
        out.append((s0, q0, pred, goal, traj))
    return out


def aimed_ball(desc, q, t_catch=0.5, speed=5.0):
    """Drag-free flight reaching the gripper at ``t_catch`` moving straight into it."""
    p, z, _ = (a[0] for a in fk_batch(desc, q))
    v = -speed * z
    v0 = v + np.array([0, 0, G * t_catch])
    b0 = p - v0 * t_catch + np.array([0, 0, 0.5 * G * t_catch ** 2])
    return predict(DragModel(0.0), BallState(b0, v0, 0.0), 1.0)


# -- reach bound ------------------------------------------------------------

def test_reach_bound_hand_value(desc):
    assert abs(reach_bound(desc, ZERO, 0.7, 0.4)[0] - 0.4225) < 5e-4


def test_reach_bound_limits(desc):
    assert np.all(reach_bound(desc, ZERO, 0.7, 1e-12) < 1e-11)
    at_max = reach_bound(desc, desc.v_max, 0.6, 0.4)
    assert np.allclose(at_max, 0.4 * desc.v_max * 0.6)
    assert np.all(reach_bound(desc, ZERO, 1e-3, 0.4) == 0.0)


def test_reach_bounds_directional(desc):
    qd0 = 0.5 * desc.v_max
    up, down = reach_bounds(desc, qd0, 0.5, 0.4)
    assert np.all(up > down)
    up0, down0 = reach_bounds(desc, ZERO, 0.5, 0.4)
    assert np.array_equal(up0, down0)


# -- high level -------------------------------------------------------------

def test_zero_motion_catch(desc):
    q0 = np.array(HOME_Q)
    goal = plan_catch(desc, CFG, q0, ZERO, aimed_ball(desc, q0), 0.0)
    assert np.max(np.abs(goal.q_f - q0)) < 1e-4
    assert goal.cost < 1e-8
    assert abs(goal.t_f - 0.5) < 1e-3


def test_unreachable_ball(desc):
    far = predict(DragModel(), BallState([8.0, 5.0, 1.0], [0.0, 0.0, 5.0]), 1.2)
    with pytest.raises(PlanningError) as exc:
        plan_catch(desc, CFG, np.array(HOME_Q), ZERO, far, 0.0)
    assert exc.value.cause == "no_feasible_catch"


def test_horizon_too_short(desc):
    q0 = np.array(HOME_Q)
    short = predict(DragModel(), BallState([1.0, 0, 1.2], [-1.0, 0, 1.0]), 0.05)
    with pytest.raises(PlanningError) as exc:
        plan_catch(desc, CFG, q0, ZERO, short, 0.0)
    assert exc.value.cause == "horizon_too_short"


def test_goals_pass_independent_checker(desc, sweep):
    goals = [(q0, g) for _, q0, _, g, _ in sweep if g is not None]
    assert len(goals) >= 450
    for q0, g in goals:
        assert check_goal(desc, CFG, q0, ZERO, 0.0, g) == []


def test_bilevel_consistency(sweep):
    goals = [g for *_, g, _ in sweep if g is not None]
    paths = [t for *_, g, t in sweep if g is not None and t is not None]
    assert len(paths) >= 0.99 * len(goals)


def test_validator_over_plans(desc, sweep):
    for _, q0, _, g, traj in sweep:
        if traj is None:
            continue
        assert validate_trajectory(desc, traj, q0, ZERO, g.q_f) == []
        assert all(r.status == "optimal" and r.kkt_residual <= 1e-6 for r in traj.reports)
        # recursion replayed from the controls
        q, qd = rollout(q0, ZERO, traj.u, traj.gamma)
        assert np.max(np.abs(q - traj.q)) < 1e-10 and np.max(np.abs(qd - traj.qd)) < 1e-10


def test_warm_start_stability(desc, sweep):
    for s0, q0, pred, g, _ in sweep[:40]:
        if g is None:
            continue
        again = plan_catch(desc, CFG, q0, ZERO, pred, 0.0, warm=g)
        assert np.max(np.abs(again.q_f - g.q_f)) < 1e-6
        assert abs(again.t_f - g.t_f) < 1e-6


def test_continuity_probe(desc, sweep):
    rng = np.random.default_rng(3)
    ratios = []
    for s0, q0, _, g, _ in sweep[:60]:
        if g is None:
            continue
        d = rng.normal(size=3)
        d *= 0.01 / np.linalg.norm(d)
        moved = predict(DragModel(0.0238), BallState(s0.b + d, s0.b_dot, s0.t), 1.2)
        try:
            g2 = plan_catch(desc, CFG, q0, ZERO, moved, 0.0, warm=g)
        except PlanningError:
            continue
        ratios.append(np.linalg.norm(g2.q_f - g.q_f) / 0.01)
    assert len(ratios) >= 40
    assert max(ratios) <= 10.0


def _project(desc, pred, x):
    """Newton projection of ``(q, t)`` onto the position equality."""
    for _ in range(20):
        b, _ = query_arrays(pred, x[8])
        c = fk_batch(desc, x[:8])[0][0] - b
        if np.linalg.norm(c) < 1e-12:
            break
        J = np.empty((3, 9))
        for i in range(9):
            e = np.zeros(9)
            e[i] = 1e-7
            bp, _ = query_arrays(pred, x[8] + e[8])
            bm, _ = query_arrays(pred, x[8] - e[8])
            J[:, i] = ((fk_batch(desc, x[:8] + e[:8])[0][0] - bp) - (fk_batch(desc, x[:8] - e[:8])[0][0] - bm)) / 2e-7
        x = x - J.T @ np.linalg.solve(J @ J.T, c)
    return x


def test_local_optimality_probe(desc, sweep):
    rng = np.random.default_rng(11)
    w = np.r_[np.full(6, CFG.w_a), np.full(2, CFG.w_b)]
    checked = 0
    for _, q0, pred, g, _ in sweep[:40]:
        if g is None:
            continue
        x_star = np.r_[g.q_f, g.t_f]
        tries = 0
        while tries < 400 and checked < 1000:
            tries += 1
            d = rng.normal(size=9)
            x = _project(desc, pred, x_star + 1e-2 * rng.uniform() * d / np.linalg.norm(d))
            if np.linalg.norm(x - x_star) > 1e-2:
                continue
            b, v = query_arrays(pred, x[8])
            cand = CatchGoal(x[:8], float(x[8]), BallState(b, v, x[8]), 0.0)
            if check_goal(desc, CFG, q0, ZERO, 0.0, cand, pos_tol=1e-9, align_slack=0.0, reach_slack=0.0):
                continue
            checked += 1
            assert np.sum(w * (g.q_f - q0) ** 2) <= np.sum(w * (x[:8] - q0) ** 2) + 1e-6
        if checked >= 1000:
            break
    assert checked >= 1000


# -- low level --------------------------------------------------------------

def test_zero_motion_path(desc):
    q0 = np.array(HOME_Q)
    goal = CatchGoal(q0.copy(), 0.5, BallState(np.zeros(3), np.ones(3)), 0.0)
    traj = plan_path(desc, CFG, q0, ZERO, goal, 0.0)
    assert np.max(np.abs(traj.u)) < 1e-12
    assert np.max(np.abs(traj.q - q0)) < 1e-12


def test_condensed_matches_rollout(rng):
    K, gam = 12, 0.05
    u = rng.normal(size=K)
    q0, qd0 = 0.3, -0.4
    Mq, Mv = condensed_matrices(K, gam)
    q, qd = rollout(q0, qd0, u, gam)
    k = np.arange(1, K + 1)
    assert np.max(np.abs(q[1:] - (q0 + k * gam * qd0 + Mq @ u))) < 1e-12
    assert np.max(np.abs(qd[1:] - (qd0 + Mv @ u))) < 1e-12


def random_joint_instance(rng, desc):
    j = int(rng.integers(8))
    K = int(rng.integers(2, 21))
    qmax, vmax, amax = desc.q_max[j], desc.v_max[j], desc.a_max[j]
    q0 = rng.uniform(-0.8, 0.8) * qmax
    qd0 = rng.uniform(-0.6, 0.6) * vmax
    up, down = reach_bounds(desc, np.full(8, qd0), K * 0.05, 0.9)
    qf = q0 + rng.uniform(-down[j], up[j])
    return joint_qp(q0, qd0, qf, K, 0.05, qmax, vmax, amax), q0, qd0


def test_joint_qp_matches_dense_kkt_oracle(desc):
    rng = np.random.default_rng(99)
    done = 0
    while done < 200:
        qp, q0, qd0 = random_joint_instance(rng, desc)
        rep = solve_qp(qp, tol=1e-9)
        ref = cvxpy_polished(qp)
        if ref is None:
            assert rep.status == "infeasible"
            continue
        assert rep.status == "optimal"
        assert rep.kkt_residual <= 1e-6
        qa, va = rollout(q0, qd0, rep.x_star, 0.05)
        qb, vb = rollout(q0, qd0, ref, 0.05)
        assert np.max(np.abs(qa - qb)) < 1e-6 and np.max(np.abs(va - vb)) < 1e-6
        done += 1


def test_joint_decoupling(desc, sweep):
    perm = np.array([3, 7, 0, 5, 1, 6, 2, 4])
    for _, q0, _, g, traj in sweep[:20]:
        if traj is None:
            continue
        inv = np.argsort(perm)
        # solve joint i of the permuted problem and map it back
        for i, j in enumerate(perm):
            rep = solve_qp(joint_qp(q0[j], 0.0, g.q_f[j], traj.K, CFG.gamma,
                                    desc.q_max[j], desc.v_max[j], desc.a_max[j]), tol=1e-9)
            assert np.array_equal(rep.x_star, traj.u[:, perm[i]])
        assert np.array_equal(perm[inv], np.arange(8))


def test_qp_smoother_than_trapezoid(desc, sweep):
    n = 0
    for _, q0, _, g, traj in sweep:
        if traj is None:
            continue
        tz = plan_path_trapezoid(desc, CFG, q0, ZERO, g, 0.0)
        assert validate_trajectory(desc, tz, q0, ZERO, g.q_f) == []
        assert np.all(traj.smoothness() <= tz.smoothness() + 1e-12)
        assert np.all(traj.max_jerk_step() <= tz.max_jerk_step() + 1e-12)
        n += 1
    assert n >= 450


def test_path_from_moving_start(desc, sweep):
    _, q0, pred, g, _ = next(s for s in sweep if s[3] is not None)
    qd0 = 0.2 * desc.v_max * np.sign(g.q_f - q0)
    traj = plan_path(desc, CFG, q0, qd0, g, 0.0)
    assert validate_trajectory(desc, traj, q0, qd0, g.q_f) == []


def test_infeasible_joint_reported(desc):
    q0 = np.array(HOME_Q)
    qf = q0.copy()
    qf[2] += 2.5
    goal = CatchGoal(qf, 0.3, BallState(np.zeros(3), np.ones(3)), 0.0)
    with pytest.raises(PlanningError) as exc:
        plan_path(desc, CFG, q0, ZERO, goal, 0.0)
    assert exc.value.cause == "qp_infeasible" and exc.value.joint == 2


# -- session and I/O --------------------------------------------------------

def test_session_keeps_trajectory_on_failure(desc, sweep):
    _, q0, pred, g, _ = next(s for s in sweep if s[3] is not None)
    sess = PlannerSession(desc, CFG, q0)
    first = sess.replan(pred, q0, ZERO, 0.0)
    assert not sess.failed and sess.goal is not None
    far = predict(DragModel(), BallState([8.0, 5.0, 1.0], [0.0, 0.0, 5.0]), 1.2)
    kept = sess.replan(far, q0, ZERO, 0.0)
    assert sess.failed and kept is first
    assert sess.n_replans == 2 and len(sess.latencies) == 2


def test_session_lock_window(desc, sweep):
    _, q0, pred, g, _ = next(s for s in sweep if s[3] is not None)
    sess = PlannerSession(desc, CFG, q0)
    traj = sess.replan(pred, q0, ZERO, 0.0)
    assert sess.replan(pred, q0, ZERO, sess.goal.t_f - 0.1) is traj
    assert sess.n_replans == 1


def test_plan_roundtrip(tmp_path, desc, sweep):
    _, q0, _, g, traj = next(s for s in sweep if s[4] is not None)
    save_plan(tmp_path / "plan.json", g, traj)
    g2, t2 = load_plan(tmp_path / "plan.json")
    assert np.array_equal(g2.q_f, g.q_f) and g2.t_f == g.t_f
    assert np.array_equal(t2.u, traj.u) and np.array_equal(t2.q, traj.q)
    assert validate_trajectory(desc, t2, q0, ZERO, g.q_f) == []


def test_config_validation():
    for bad in (dict(w_a=0.0), dict(lam=1.0), dict(gamma=0.0), dict(low_level="spline")):
        with pytest.raises(ValueError):
            PlannerConfig(**bad)
