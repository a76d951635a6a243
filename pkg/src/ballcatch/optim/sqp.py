"""Sequential quadratic programming with damped BFGS and an L1 merit line search.

Derivatives come from central finite differences. Problems may provide a
``batch`` callable that evaluates objective and constraints for a whole stack
of points at once, which turns the 2n+1 finite-difference evaluations into one
vectorised call.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .qp import QpProblem, solve_qp
from .report import SolveReport

VectorFn = Callable[[np.ndarray], np.ndarray]


def _as_vector_fn(c) -> VectorFn | None:
    if c is None:
        return None
    if callable(c):
        return c
    fns = list(c)
    if not fns:
        return None
    return lambda x: np.array([float(fn(x)) for fn in fns])


@dataclass
class NlpProblem:
    """``min objective(x)`` s.t. ``eq(x) = 0``, ``ineq(x) <= 0``, ``lb <= x <= ub``.

    ``eq``/``ineq`` are either one vector-valued callable or a list of scalar
    callables. ``batch(X)`` (optional) maps an ``(m, n)`` stack to
    ``(f (m,), ce (m, me), ci (m, mi))``.
    """

    objective: Callable[[np.ndarray], float]
    x0: np.ndarray
    eq: VectorFn | Sequence[Callable] | None = None
    ineq: VectorFn | Sequence[Callable] | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    batch: Callable | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        n = self.x0.size
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        self.eq = _as_vector_fn(self.eq)
        self.ineq = _as_vector_fn(self.ineq)

    def evaluate(self, X: np.ndarray):
        X = np.atleast_2d(X)
        if self.batch is not None:
            f, ce, ci = self.batch(X)
            return (np.asarray(f, float).reshape(len(X)), np.asarray(ce, float).reshape(len(X), -1),
                    np.asarray(ci, float).reshape(len(X), -1))
        f = np.array([float(self.objective(x)) for x in X])
        ce = np.array([np.atleast_1d(self.eq(x)) for x in X], float) if self.eq else np.zeros((len(X), 0))
        ci = np.array([np.atleast_1d(self.ineq(x)) for x in X], float) if self.ineq else np.zeros((len(X), 0))
        return f, ce.reshape(len(X), -1), ci.reshape(len(X), -1)


@dataclass
class SqpOptions:
    tol: float = 1e-6
    step_tol: float = 1e-8
    max_iter: int = 100
    fd_step: float = 1e-6
    qp_tol: float = 1e-10
    hessian0: np.ndarray | None = None
    max_backtracks: int = 30
    elastic_weight: float = 100.0
    max_elastic: int = 5  # consecutive relaxed subproblems before giving up as infeasible


def _stencil(x, lb, ub, rel):
    """Central-difference points, shifted one-sided where a bound is too close."""
    n = x.size
    h = rel * np.maximum(1.0, np.abs(x))
    plus = np.tile(x, (n, 1))
    minus = np.tile(x, (n, 1))
    for i in range(n):
        hi, lo = x[i] + h[i], x[i] - h[i]
        if hi > ub[i]:
            hi, lo = x[i], x[i] - 2 * h[i]
        elif lo < lb[i]:
            hi, lo = x[i] + 2 * h[i], x[i]
        plus[i, i], minus[i, i] = hi, lo
    return plus, minus


def fd_derivatives(problem: NlpProblem, x, rel: float = 1e-6):
    """Values and central-difference derivatives at ``x``.

    Returns ``f, ce, ci, grad, J_eq, J_in``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    plus, minus = _stencil(x, problem.lb, problem.ub, rel)
    f, ce, ci = problem.evaluate(np.vstack([x[None], plus, minus]))
    width = (np.diag(plus) - np.diag(minus))
    grad = (f[1:n + 1] - f[n + 1:]) / width
    Je = ((ce[1:n + 1] - ce[n + 1:]) / width[:, None]).T
    Ji = ((ci[1:n + 1] - ci[n + 1:]) / width[:, None]).T
    return f[0], ce[0], ci[0], grad, Je, Ji


def _violation(ce, ci):
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))


def _kkt(grad, Je, Ji, ce, ci, x, lb, ub, rep: SolveReport) -> float:
    ye, yi = rep.y_eq, rep.y_in
    stat = grad + Je.T @ ye + Ji.T @ yi + rep.y_ub - rep.y_lb
    parts = [np.max(np.abs(stat), initial=0.0), np.max(np.abs(ce), initial=0.0),
             np.max(ci, initial=0.0), np.max(np.abs(yi * ci), initial=0.0),
             np.max(lb - x, initial=0.0), np.max(x - ub, initial=0.0)]
    return float(max(parts))


def _elastic_qp(B, g, Je, ce, Ji, ci, dlb, dub, weight, tol):
    """Relaxed subproblem: slacks absorb linearised constraint violation."""
    n, me, mi = g.size, ce.size, ci.size
    ns = 2 * me + mi
    H = np.zeros((n + ns, n + ns))
    H[:n, :n] = B
    H[n:, n:] = 1e-6 * np.eye(ns)
    f = np.r_[g, weight * np.ones(ns)]
    A_eq = np.hstack([Je, -np.eye(me), np.eye(me), np.zeros((me, mi))]) if me else None
    A_in = np.hstack([Ji, np.zeros((mi, 2 * me)), -np.eye(mi)]) if mi else None
    qp = QpProblem(H, f, A_eq, -ce if me else None, np.r_[dlb, np.zeros(ns)], np.r_[dub, np.full(ns, np.inf)],
                   A_in, -ci if mi else None)
    # start with every slack at its zero bound instead of adding those rows one by one
    n_up = int(np.sum(np.isfinite(qp.ub)))
    lo = np.flatnonzero(np.isfinite(qp.lb))
    start = mi + n_up + int(np.sum(lo < n))
    rep = solve_qp(qp, tol=tol, warm_start=list(range(start, start + ns)))
    if rep.ok:
        rep.y_lb, rep.y_ub = rep.y_lb[:n], rep.y_ub[:n]
        rep.x_star = rep.x_star[:n]
    return rep


def solve_sqp(p: NlpProblem, opts: SqpOptions | None = None) -> SolveReport:
    opts = opts or SqpOptions()
    t_start = time.perf_counter()
    lb, ub = p.lb, p.ub
    x = np.clip(p.x0, lb, ub)
    n = x.size
    B = np.eye(n) if opts.hessian0 is None else np.array(opts.hessian0, dtype=float)
    f, ce, ci, g, Je, Ji = fd_derivatives(p, x, opts.fd_step)
    mu = 1.0
    active: tuple[int, ...] = ()
    history: list[tuple[float, float]] = []
    kkt = np.inf
    last = None
    n_elastic = 0

    def done(status, it, rep, msg=""):
        out = SolveReport(x_star=x, status=status, iterations=it, kkt_residual=kkt,
                          wall_time=time.perf_counter() - t_start, message=msg,
                          merit_history=history, hessian=B)
        if rep is not None:
            out.y_eq, out.y_in, out.y_lb, out.y_ub = rep.y_eq, rep.y_in, rep.y_lb, rep.y_ub
        return out

    for it in range(1, opts.max_iter + 1):
        dlb, dub = lb - x, ub - x
        qp = QpProblem(B, g, Je if ce.size else None, -ce if ce.size else None, dlb, dub,
                       Ji if ci.size else None, -ci if ci.size else None)
        rep = solve_qp(qp, tol=opts.qp_tol, warm_start=active)
        if rep.status in ("numerical", "max_iter") and not np.allclose(B, np.eye(n)):
            B = np.eye(n)
            qp.H = B
            rep = solve_qp(qp, tol=opts.qp_tol)
        if not rep.ok:
            rep = _elastic_qp(B, g, Je, ce, Ji, ci, dlb, dub, min(max(opts.elastic_weight, 10 * mu), 1e4 * opts.elastic_weight),
                              opts.qp_tol)
            if not rep.ok:
                return done("infeasible_subproblem", it, last, f"elastic subproblem {rep.status}")
            active = ()
            n_elastic += 1
            if n_elastic >= opts.max_elastic or float(np.max(np.abs(rep.x_star), initial=0.0)) < opts.step_tol:
                return done("infeasible", it, rep, "linearised constraints stay inconsistent")
        else:
            active = rep.active_set
            n_elastic = 0
        last = rep
        d = rep.x_star
        kkt = _kkt(g, Je, Ji, ce, ci, x, lb, ub, rep)
        step = float(np.max(np.abs(d), initial=0.0))
        if kkt < opts.tol and step < opts.step_tol:
            return done("optimal", it, rep)

        lam_max = float(max(np.max(np.abs(rep.y_eq), initial=0.0), np.max(rep.y_in, initial=0.0)))
        if mu < 1.1 * lam_max + 1e-6:
            mu = 1.5 * lam_max + 1e-3
        viol = _violation(ce, ci)
        phi = f + mu * viol
        D = float(g @ d) - mu * viol
        if D > 0 and not np.allclose(B, np.eye(n)):
            B = np.eye(n)
            continue

        # Backtracking on the L1 merit, with one second-order correction try.
        alpha = 1.0
        accepted = False
        x_new = None
        for k in range(opts.max_backtracks):
            trial = np.clip(x + alpha * d, lb, ub)
            ft, cet, cit = (a[0] for a in p.evaluate(trial[None]))
            phit = ft + mu * _violation(cet, cit)
            if phit <= phi + 1e-4 * alpha * min(D, 0.0) and np.isfinite(phit):
                accepted, x_new = True, trial
                break
            if k == 0 and cet.size + cit.size:
                soc = _second_order_correction(trial, cet, cit, Je, Ji, active, ce.size)
                if soc is not None:
                    trial2 = np.clip(trial + soc, lb, ub)
                    f2, ce2, ci2 = (a[0] for a in p.evaluate(trial2[None]))
                    phi2 = f2 + mu * _violation(ce2, ci2)
                    if phi2 <= phi + 1e-4 * min(D, 0.0) and np.isfinite(phi2):
                        accepted, x_new, phit = True, trial2, phi2
                        break
            alpha *= 0.5
        if not accepted:
            if step < opts.step_tol and kkt < 10 * opts.tol:
                return done("optimal" if kkt < opts.tol else "numerical", it, rep)
            if not np.allclose(B, np.eye(n)):
                B = np.eye(n)
                continue
            return done("numerical", it, rep, "line search failed")
        history.append((float(phi), float(phit)))

        s = x_new - x
        gl_old = g + Je.T @ rep.y_eq + Ji.T @ rep.y_in
        x = x_new
        f, ce, ci, g, Je, Ji = fd_derivatives(p, x, opts.fd_step)
        y = g + Je.T @ rep.y_eq + Ji.T @ rep.y_in - gl_old
        B = _damped_bfgs(B, s, y)
        if float(np.max(np.abs(s), initial=0.0)) < opts.step_tol:
            rep2 = solve_qp(QpProblem(B, g, Je if ce.size else None, -ce if ce.size else None, lb - x, ub - x,
                                      Ji if ci.size else None, -ci if ci.size else None),
                            tol=opts.qp_tol, warm_start=active)
            if rep2.ok:
                kkt = _kkt(g, Je, Ji, ce, ci, x, lb, ub, rep2)
                if kkt < opts.tol:
                    return done("optimal", it, rep2)
    return done("max_iter", opts.max_iter, last)


def _second_order_correction(x, ce, ci, Je, Ji, active, me):
    rows, vals = [], []
    if me:
        rows.append(Je)
        vals.append(ce)
    act_in = [j for j in active if j < len(ci)] if ci.size else []
    if act_in:
        rows.append(Ji[act_in])
        vals.append(ci[act_in])
    if not rows:
        return None
    A = np.vstack(rows)
    c = np.concatenate(vals)
    try:
        return -A.T @ np.linalg.solve(A @ A.T + 1e-12 * np.eye(len(c)), c)
    except np.linalg.LinAlgError:
        return None


def _damped_bfgs(B, s, y):
    """Powell-damped BFGS update; keeps B positive definite."""
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1 - theta) * Bs
        sy = float(s @ y)
    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    return 0.5 * (B + B.T)
