"""Dense convex QP by a dual active-set method.

Solves::

    min  0.5 x'Hx + f'x
    s.t. A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub

The method starts from the equality-constrained minimiser and adds violated
inequalities one at a time while keeping the multipliers nonnegative
(Goldfarb-Idnani style, with each step computed from a fresh KKT solve). It
therefore needs no feasible starting point and detects infeasibility through a
dual ray. ``H`` may be singular as long as it is positive definite on the null
space of the equality constraints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .report import SolveReport


class QpError(ValueError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise QpError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if n and np.max(np.abs(self.H - self.H.T)) > 1e-10:
            raise QpError("H must be symmetric")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, n, "inequality")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(n)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(self.lb > self.ub):
            raise QpError("lb must not exceed ub")

    @property
    def n(self) -> int:
        return self.f.size


def _rows(A, b, n, what):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] != n or A.shape[0] != b.size:
        raise QpError(f"{what} constraints have inconsistent shapes {A.shape}, {b.shape}")
    return A, b


def _stack_inequalities(p: QpProblem):
    """All inequalities as ``C x <= d``; returns ``(C, d, kind, var)``.

    ``kind`` is 0 for general rows, 1 for upper bounds, -1 for lower bounds.
    """
    n = p.n
    up = np.flatnonzero(np.isfinite(p.ub))
    lo = np.flatnonzero(np.isfinite(p.lb))
    C = np.vstack([p.A_in, np.eye(n)[up], -np.eye(n)[lo]])
    d = np.concatenate([p.b_in, p.ub[up], -p.lb[lo]])
    kind = np.concatenate([np.zeros(len(p.b_in), int), np.ones(up.size, int), -np.ones(lo.size, int)])
    var = np.concatenate([np.full(len(p.b_in), -1), up, lo])
    return C, d, kind, var


def kkt_residual(p: QpProblem, x, y_eq, y_in, y_lb, y_ub) -> float:
    """Max of stationarity, primal infeasibility, dual infeasibility and complementarity."""
    x = np.asarray(x, dtype=float)
    grad = p.H @ x + p.f + p.A_eq.T @ y_eq + p.A_in.T @ y_in + y_ub - y_lb
    s_in = p.A_in @ x - p.b_in
    with np.errstate(invalid="ignore"):
        su = np.nan_to_num(x - p.ub, nan=0.0, neginf=-1.0)
        sl = np.nan_to_num(p.lb - x, nan=0.0, neginf=-1.0)
    # stationarity | primal | dual sign | complementarity, all as one max
    terms = np.concatenate([
        np.abs(grad), np.abs(p.A_eq @ x - p.b_eq), s_in, su, sl, -y_in, -y_ub, -y_lb,
        np.abs(y_in * s_in), np.abs(y_ub * su), np.abs(y_lb * sl), [0.0]])
    return float(np.max(terms))


def _check_psd(H: np.ndarray) -> bool:
    scale = 1.0 + np.max(np.abs(np.diag(H)), initial=0.0)
    try:
        np.linalg.cholesky(H + 1e-10 * scale * np.eye(len(H)))
    except np.linalg.LinAlgError:
        return False
    return True


class _Kkt:
    """KKT solves for a working set of inequality rows on top of the equalities."""

    def __init__(self, H, f, E, b, C, d):
        self.H, self.f, self.E, self.b, self.C, self.d = H, f, E, b, C, d
        self.n, self.me = len(f), len(b)

    def matrix(self, W):
        N = np.vstack([self.E, self.C[W]]) if W else self.E
        m = N.shape[0]
        K = np.zeros((self.n + m, self.n + m))
        K[:self.n, :self.n] = self.H
        K[:self.n, self.n:] = N.T
        K[self.n:, :self.n] = N
        return K

    def solve(self, K, rhs_top, rhs_bottom):
        rhs = np.concatenate([rhs_top, rhs_bottom])
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
        return sol[:self.n], sol[self.n:]

    def eqp(self, W):
        K = self.matrix(W)
        x, lam = self.solve(K, -self.f, np.concatenate([self.b, self.d[W]]) if W else self.b)
        return K, x, lam


def _independent(kkt: _Kkt, W, j) -> bool:
    N = np.vstack([kkt.E, kkt.C[W + [j]]])
    if N.shape[0] > kkt.n:
        return False
    s = np.linalg.svd(N, compute_uv=False)
    return bool(s[-1] > 1e-10 * max(1.0, s[0]))


def solve_qp(p: QpProblem, tol: float = 1e-8, max_iter: int | None = None,
             warm_start: Sequence[int] | None = None) -> SolveReport:
    """Solve a convex QP; ``warm_start`` is a previous report's ``active_set``."""
    t_start = time.perf_counter()
    n = p.n
    C, d, kind, var = _stack_inequalities(p)
    m = len(d)
    max_iter = max_iter or 10 * (n + m) + 20
    # residual test is relative to the size of the data
    scale = max(1.0, float(np.max(np.abs(p.f), initial=0.0)), float(np.max(np.abs(p.H), initial=0.0)),
                float(np.max(np.abs(p.b_eq), initial=0.0)))

    def report(x, status, it, W, lam_eq, u_W, note=""):
        u = np.zeros(m)
        if W:
            u[W] = u_W
        y_in = u[kind == 0]
        y_ub = np.zeros(n)
        y_lb = np.zeros(n)
        y_ub[var[kind == 1]] = u[kind == 1]
        y_lb[var[kind == -1]] = u[kind == -1]
        if x is None:
            x = np.full(n, np.nan)
            res = np.inf
        else:
            res = kkt_residual(p, x, lam_eq, y_in, y_lb, y_ub)
        if status == "optimal" and res > tol * scale:
            status = "numerical"
            note = note or f"KKT residual {res:.2e} above tolerance"
        return SolveReport(x_star=x, status=status, iterations=it, kkt_residual=res,
                           wall_time=time.perf_counter() - t_start, y_eq=lam_eq, y_in=y_in,
                           y_lb=y_lb, y_ub=y_ub, active_set=tuple(int(j) for j in W), message=note)

    empty = np.zeros(0)
    if not _check_psd(p.H):
        return report(None, "numerical", 0, [], np.zeros(p.b_eq.size), empty, "H is not positive semidefinite")

    kkt = _Kkt(p.H, p.f, p.A_eq, p.b_eq, C, d)
    h_scale = max(1.0, float(np.max(np.abs(p.H), initial=0.0)))
    me = kkt.me
    W: list[int] = []
    try:
        K, x, lam = kkt.eqp(W)
    except np.linalg.LinAlgError:
        if me:
            xs, *_ = np.linalg.lstsq(p.A_eq, p.b_eq, rcond=None)
            if np.max(np.abs(p.A_eq @ xs - p.b_eq)) > tol:
                return report(None, "infeasible", 0, [], np.zeros(me), empty, "inconsistent equalities")
        return report(None, "numerical", 0, [], np.zeros(me), empty, "singular KKT system")

    # Warm start: adopt the previous working set, then drop rows until dual feasible.
    if warm_start:
        cand = list(dict.fromkeys(j for j in warm_start if 0 <= j < m))
        if cand and _independent(kkt, cand[:-1], cand[-1]):
            W = cand
        else:
            for j in cand:
                if _independent(kkt, W, j):
                    W.append(j)
        while W:
            try:
                K, x, lam = kkt.eqp(W)
            except np.linalg.LinAlgError:
                W.pop()
                continue
            u = lam[me:]
            if np.min(u) >= 0:
                break
            W.pop(int(np.argmin(u)))
        if not W:
            K, x, lam = kkt.eqp(W)

    lam_eq, u_W = lam[:me].copy(), lam[me:].copy()
    it = 0
    while True:
        viol = C @ x - d if m else empty
        if W:
            viol = viol.copy()
            viol[W] = -np.inf
        if m == 0 or np.max(viol) <= tol:
            return report(x, "optimal", it, W, lam_eq, u_W)
        p_idx = int(np.argmax(viol))
        a_p = C[p_idx]
        t_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return report(x, "max_iter", it, W, lam_eq, u_W)
            try:
                dx, dlam = kkt.solve(K, -a_p, np.zeros(K.shape[0] - n))
            except np.linalg.LinAlgError:
                return report(x, "numerical", it, W, lam_eq, u_W, "singular KKT system")
            du = dlam[me:]
            curv = -float(a_p @ dx)
            # a full working set leaves no room to move; otherwise compare the
            # curvature along dx with what an independent row would give
            dependent = me + len(W) >= n or curv <= 1e-11 * float(a_p @ a_p) / h_scale
            # Dual blocking step among inequalities in the working set.
            t2, block = np.inf, -1
            for i in range(len(W)):
                if du[i] < -1e-14:
                    ratio = u_W[i] / -du[i]
                    if ratio < t2:
                        t2, block = ratio, i
            if dependent:
                if block < 0:
                    return report(x, "infeasible", it, W, lam_eq, u_W,
                                  f"constraint {p_idx} cannot be satisfied with the active set")
                t = t2
            else:
                t1 = float(a_p @ x - d[p_idx]) / curv
                t = min(t1, t2)
                x = x + t * dx
            lam_eq = lam_eq + t * dlam[:me]
            u_W = u_W + t * du
            t_p += t
            if not dependent and t == t1:
                W.append(p_idx)
                u_W = np.append(u_W, t_p)
                try:
                    K, x, lam = kkt.eqp(W)
                    lam_eq, u_W = lam[:me].copy(), np.maximum(lam[me:], 0.0)
                except np.linalg.LinAlgError:
                    K = kkt.matrix(W)
                break
            W.pop(block)
            u_W = np.delete(u_W, block)
            K = kkt.matrix(W)
