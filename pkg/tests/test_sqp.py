import numpy as np
import pytest

from ballcatch.optim import NlpProblem, SqpOptions, fd_derivatives, solve_sqp

r2 = np.sqrt(0.5)

# (name, problem factory, known optimum)
CASES = [
    ("bound by inequality",
     lambda: NlpProblem(lambda x: (x[0] - 2) ** 2, [0.0], ineq=[lambda x: x[0] - 1]), [1.0]),
    ("linear on circle",
     lambda: NlpProblem(lambda x: x[0] + x[1], [1.0, 0.5], eq=[lambda x: x[0] ** 2 + x[1] ** 2 - 1]),
     [-r2, -r2]),
    ("rosenbrock",
     lambda: NlpProblem(lambda x: 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2, [-1.2, 1.0]), [1.0, 1.0]),
    ("hs6",
     lambda: NlpProblem(lambda x: (1 - x[0]) ** 2, [-1.2, 1.0], eq=[lambda x: 10 * (x[1] - x[0] ** 2)]),
     [1.0, 1.0]),
    ("box quadratic",
     lambda: NlpProblem(lambda x: (x[0] - 3) ** 2 + (x[1] + 1) ** 2, [1.0, 1.0], lb=[0, 0], ub=[2, 2]),
     [2.0, 0.0]),
    ("halfplane",
     lambda: NlpProblem(lambda x: x @ x, [2.0, -1.0], ineq=[lambda x: 1 - x[0] - x[1]]), [0.5, 0.5]),
    ("hs35",
     lambda: NlpProblem(lambda x: 9 - 8 * x[0] - 6 * x[1] - 4 * x[2] + 2 * x[0] ** 2 + 2 * x[1] ** 2
                        + x[2] ** 2 + 2 * x[0] * x[1] + 2 * x[0] * x[2], [0.5, 0.5, 0.5],
                        ineq=[lambda x: x[0] + x[1] + 2 * x[2] - 3], lb=[0, 0, 0]),
     [4 / 3, 7 / 9, 4 / 9]),
    ("saddle on a line",
     lambda: NlpProblem(lambda x: -x[0] * x[1], [1.5, 0.5], eq=[lambda x: x[0] + x[1] - 2]), [1.0, 1.0]),
    ("hs28",
     lambda: NlpProblem(lambda x: (x[0] + x[1]) ** 2 + (x[1] + x[2]) ** 2, [-4.0, 1.0, 1.0],
                        eq=[lambda x: x[0] + 2 * x[1] + 3 * x[2] - 1]), [0.5, -0.5, 0.5]),
    ("point to disk",
     lambda: NlpProblem(lambda x: (x[0] - 2) ** 2 + (x[1] - 2) ** 2, [0.0, 0.0],
                        ineq=[lambda x: x[0] ** 2 + x[1] ** 2 - 2]), [1.0, 1.0]),
    ("hs21",
     lambda: NlpProblem(lambda x: 0.01 * x[0] ** 2 + x[1] ** 2 - 100, [-1.0, -1.0],
                        ineq=[lambda x: 10 - 10 * x[0] + x[1]], lb=[2, -50], ub=[50, 50]), [2.0, 0.0]),
    ("hs71",
     lambda: NlpProblem(lambda x: x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2], [1.0, 5.0, 5.0, 1.0],
                        eq=[lambda x: x @ x - 40], ineq=[lambda x: 25 - np.prod(x)], lb=np.ones(4), ub=np.full(4, 5.0)),
     [1.0, 4.74299963, 3.82114998, 1.37940829]),
]


@pytest.mark.parametrize("name,make,x_ref", CASES, ids=[c[0] for c in CASES])
def test_known_optimum(name, make, x_ref):
    opts = SqpOptions(tol=1e-8, step_tol=1e-9, max_iter=300)
    rep = solve_sqp(make(), opts)
    assert rep.status == "optimal", rep.message
    assert np.max(np.abs(rep.x_star - np.array(x_ref))) < 1e-5


def test_fd_gradients_match_analytic(rng):
    p = NlpProblem(lambda x: np.sin(x[0]) * x[1] ** 2 + np.exp(0.3 * x[2]), np.zeros(3),
                   eq=[lambda x: x[0] * x[1] - x[2]], ineq=[lambda x: x @ x - 4])
    for _ in range(20):
        x = rng.normal(size=3)
        _, _, _, g, Je, Ji = fd_derivatives(p, x)
        g_ref = [np.cos(x[0]) * x[1] ** 2, 2 * np.sin(x[0]) * x[1], 0.3 * np.exp(0.3 * x[2])]
        assert np.max(np.abs(g - g_ref)) < 1e-4 * max(1.0, np.abs(g_ref).max())
        assert np.max(np.abs(Je[0] - [x[1], x[0], -1])) < 1e-4
        assert np.max(np.abs(Ji[0] - 2 * x)) < 1e-4


def test_fd_stays_inside_bounds():
    seen = []

    def f(x):
        seen.append(x.copy())
        return float(np.sqrt(x[0]))

    p = NlpProblem(f, [0.0], lb=[0.0], ub=[1.0])
    _, _, _, g, _, _ = fd_derivatives(p, np.array([0.0]))
    assert min(s[0] for s in seen) >= 0.0 and np.isfinite(g[0])


def test_merit_decreases_on_accepted_steps():
    _, make, _ = CASES[-1]
    rep = solve_sqp(make())
    assert rep.merit_history
    for before, after in rep.merit_history:
        assert after <= before + 1e-12


def test_infeasible_reported():
    box = dict(lb=[-1.0, -1.0], ub=[1.0, 1.0])
    linear = NlpProblem(lambda x: x @ x, [0.3, 0.2], ineq=[lambda x: 5 - x[0] - x[1]], **box)
    ring = NlpProblem(lambda x: x @ x, [0.3, 0.2], ineq=[lambda x: 9 - x @ x], **box)
    for p in (linear, ring):
        rep = solve_sqp(p)
        assert rep.status in ("infeasible", "infeasible_subproblem"), rep.status
    # without bounds the iterates run into the stationary point of the violation;
    # any non-success status is acceptable there
    assert not solve_sqp(NlpProblem(lambda x: x @ x, [0.3, 0.2], ineq=[lambda x: x @ x + 1])).ok


def test_batch_and_scalar_paths_agree():
    f = lambda x: (x[0] - 1) ** 2 + (x[1] - 2) ** 2
    c = lambda x: x[0] + x[1] - 1

    def batch(X):
        return ((X[:, 0] - 1) ** 2 + (X[:, 1] - 2) ** 2, np.zeros((len(X), 0)), (X[:, 0] + X[:, 1] - 1)[:, None])

    a = solve_sqp(NlpProblem(f, [0.0, 0.0], ineq=[c]))
    b = solve_sqp(NlpProblem(f, [0.0, 0.0], ineq=[c], batch=batch))
    assert np.max(np.abs(a.x_star - b.x_star)) < 1e-10
    assert np.max(np.abs(a.x_star - [0.0, 1.0])) < 1e-5
