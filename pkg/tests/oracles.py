"""Independent reference solvers used only by the tests."""
import itertools

import numpy as np


def _inequalities(qp):
    rows, rhs = [qp.A_in], [qp.b_in]
    for i in range(qp.n):
        e = np.zeros(qp.n)
        e[i] = 1.0
        if np.isfinite(qp.ub[i]):
            rows.append(e[None])
            rhs.append([qp.ub[i]])
        if np.isfinite(qp.lb[i]):
            rows.append(-e[None])
            rhs.append([-qp.lb[i]])
    return np.vstack(rows), np.concatenate(rhs)


def kkt_solve(qp, C, d, active):
    """Treat ``active`` inequality rows as equalities; returns ``(x, y_eq, u)`` or None if singular."""
    n = qp.n
    N = np.vstack([qp.A_eq, C[list(active)]])
    m = N.shape[0]
    K = np.block([[qp.H, N.T], [N, np.zeros((m, m))]])
    rhs = np.r_[-qp.f, qp.b_eq, d[list(active)]]
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or np.max(np.abs(K @ sol - rhs)) > 1e-9:
        return None
    return sol[:n], sol[n:n + len(qp.b_eq)], sol[n + len(qp.b_eq):]


def enumerate_qp(qp, tol=1e-9):
    """Brute force over every subset of inequalities; first KKT point found wins."""
    C, d = _inequalities(qp)
    m = len(d)
    for size in range(0, min(m, qp.n) + 1):
        for active in itertools.combinations(range(m), size):
            out = kkt_solve(qp, C, d, active)
            if out is None:
                continue
            x, _, u = out
            if np.all(u >= -tol) and np.all(C @ x - d <= tol):
                return x
    return None


def cvxpy_polished(qp):
    """Clarabel solve, then an exact dense KKT solve on the active set it identifies.

    The polished point is only returned if it satisfies the KKT conditions
    (primal feasible, multipliers of the active rows nonnegative), which for a
    convex problem certifies it as the optimum.
    """
    import cvxpy as cp
    x = cp.Variable(qp.n)
    cons = []
    if len(qp.b_eq):
        cons.append(qp.A_eq @ x == qp.b_eq)
    C, d = _inequalities(qp)
    if len(d):
        cons.append(C @ x <= d)
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(qp.H)) + qp.f @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return None
    xs = x.value
    slack = d - C @ xs
    scale = 1.0 + np.abs(d)
    for tol in (1e-6, 1e-7, 1e-5, 1e-8, 1e-4):
        chosen = []
        for i in np.flatnonzero(slack <= tol * scale):
            trial = np.vstack([qp.A_eq, C[chosen + [i]]])
            if np.linalg.matrix_rank(trial) == trial.shape[0]:
                chosen.append(int(i))
        out = kkt_solve(qp, C, d, chosen)
        if out is None:
            continue
        xp, _, u = out
        if np.all(u >= -1e-9) and np.all(C @ xp - d <= 1e-9):
            return xp
    return None
