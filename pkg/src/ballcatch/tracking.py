"""Joint-level plant surrogate and learned reference pre-shaping.

The plant is, per joint, a delayed PD loop producing a velocity command that a
first-order lag follows. Its relative degree (control steps from a reference
change to the first output change) is ``delay + 1``.

The add-on is a small MLP per joint that maps the current output and a desired
output ``r`` steps ahead to the reference that should be sent now. Everything
is expressed as offsets from the next desired output, so a zero network is a
pass-through.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .planner import PlanningError, horizon_steps, joint_qp, rollout
from .optim import solve_qp
from .robot_model import N_JOINTS, RobotDescription

MODEL_FORMAT = "ballcatch.mlp"
MODEL_VERSION = 1
HIDDEN = (10, 10)

TRAIN_DQ = np.array([1.36, 1.36, 1.36, 1.75, 1.75, 2.53, 0.76, 0.76])
TRAIN_DURATIONS = (2.0, 3.0, 4.0)
TEST_DQ = np.array([0.8, 0.8, 0.8, 1.1, 1.1, 1.1, 0.2, 0.2])
TEST_DURATION = 1.0


class TrainingError(RuntimeError):
    pass


# -- plant --------------------------------------------------------------------

@dataclass(frozen=True)
class PlantConfig:
    """Per-joint closed-loop surrogate. Arrays have one entry per joint."""

    k_p: np.ndarray
    k_d: np.ndarray
    tau: np.ndarray
    delay: np.ndarray
    dt: float
    q_max: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray

    def __post_init__(self):
        for key in ("k_p", "k_d", "tau", "q_max", "v_max", "a_max"):
            arr = np.asarray(getattr(self, key), dtype=float).reshape(N_JOINTS)
            object.__setattr__(self, key, arr)
        delay = np.asarray(self.delay).reshape(N_JOINTS)
        if not np.all(delay == np.round(delay)) or np.any(delay < 0):
            raise ValueError("delay must be a non-negative integer per joint")
        object.__setattr__(self, "delay", delay.astype(int))
        if np.any(self.tau <= 0) or self.dt <= 0:
            raise ValueError("tau and dt must be positive")

    @classmethod
    def default(cls, desc: RobotDescription, dt: float = 0.008, arm_r: int = 8, base_r: int = 14,
                **overrides) -> "PlantConfig":
        arm, base = slice(0, 6), slice(6, 8)
        k_p = np.empty(N_JOINTS)
        k_p[arm], k_p[base] = 6.0, 8.0
        k_d = np.full(N_JOINTS, 0.02)
        tau = np.empty(N_JOINTS)
        tau[arm], tau[base] = 0.06, 0.03
        delay = np.empty(N_JOINTS, int)
        delay[arm], delay[base] = arm_r - 1, base_r - 1
        kw = dict(k_p=k_p, k_d=k_d, tau=tau, delay=delay, dt=dt,
                  q_max=desc.q_max, v_max=desc.v_max, a_max=desc.a_max)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def passthrough(cls, desc: RobotDescription, dt: float = 0.008) -> "PlantConfig":
        """Idealised loop whose output equals the reference one step later (r = 1)."""
        return cls(k_p=np.full(N_JOINTS, 1.0 / dt), k_d=np.zeros(N_JOINTS), tau=np.full(N_JOINTS, dt),
                   delay=np.zeros(N_JOINTS, int), dt=dt, q_max=desc.q_max,
                   v_max=np.full(N_JOINTS, np.inf), a_max=np.full(N_JOINTS, np.inf))

    @property
    def relative_degree(self) -> np.ndarray:
        return self.delay + 1


@dataclass(frozen=True)
class PlantState:
    q: np.ndarray
    v: np.ndarray
    pipe: np.ndarray  # past references, newest first; shape (max_delay, 8)

    @classmethod
    def at_rest(cls, cfg: PlantConfig, q) -> "PlantState":
        q = np.asarray(q, dtype=float).copy()
        depth = max(int(cfg.delay.max()), 1)
        return cls(q, np.zeros(N_JOINTS), np.tile(q, (depth, 1)))


def plant_step(cfg: PlantConfig, state: PlantState, y_ref) -> tuple[PlantState, np.ndarray]:
    """Advance one control step; returns the new state and the measured position."""
    y_ref = np.asarray(y_ref, dtype=float)
    cols = np.arange(N_JOINTS)
    delayed = state.pipe[np.maximum(cfg.delay - 1, 0), cols]
    y_eff = np.where(cfg.delay == 0, y_ref, delayed)
    v_cmd = np.clip(cfg.k_p * (y_eff - state.q) - cfg.k_d * state.v, -cfg.v_max, cfg.v_max)
    acc = np.clip((v_cmd - state.v) / cfg.tau, -cfg.a_max, cfg.a_max)
    v = np.clip(state.v + cfg.dt * acc, -cfg.v_max, cfg.v_max)
    q = state.q + cfg.dt * v
    pipe = np.vstack([y_ref[None], state.pipe[:-1]])
    return PlantState(q, v, pipe), q


def measure_relative_degree(cfg: PlantConfig, joint: int, step: float = 1e-3, horizon: int = 100) -> int:
    """Steps between a reference step and the first change of the output."""
    q0 = np.zeros(N_JOINTS)
    state = PlantState.at_rest(cfg, q0)
    y = q0.copy()
    y[joint] = step
    for k in range(1, horizon + 1):
        state, q = plant_step(cfg, state, y)
        if q[joint] != q0[joint]:
            return k
    raise RuntimeError(f"no response within {horizon} steps")


def run_closed_loop(cfg: PlantConfig, y_d, model: "MlpModel | None" = None,
                    q0=None) -> tuple[np.ndarray, np.ndarray]:
    """Track a desired output stream ``y_d`` (N+1, 8) starting from ``y_d[0]``.

    At step ``k`` the reference sent is ``y_d[k+1]``, or the pre-shaped version
    of it when a model is given. Returns measured outputs ``q`` (N+1, 8) and the
    references actually applied (N, 8).
    """
    y_d = np.asarray(y_d, dtype=float)
    n = len(y_d) - 1
    state = PlantState.at_rest(cfg, y_d[0] if q0 is None else q0)
    q = np.empty_like(y_d)
    q[0] = state.q
    refs = np.empty((n, N_JOINTS))
    if model is not None:
        look = model.lookahead
        cols = np.arange(N_JOINTS)
    for k in range(n):
        if model is None:
            y = y_d[k + 1]
        else:
            fut = y_d[np.minimum(k + look, n), cols]
            y = preshape(model, q[k], fut, y_d[k + 1], cfg.q_max)
        state, q[k + 1] = plant_step(cfg, state, y)
        refs[k] = y
    return q, refs


def tracking_rmse(q, y_d) -> np.ndarray:
    """Per-joint RMSE between measured and desired outputs (initial sample excluded)."""
    e = np.asarray(q)[1:] - np.asarray(y_d)[1:]
    return np.sqrt(np.mean(e * e, axis=0))


# -- reference trajectories ---------------------------------------------------

def point_to_point(desc: RobotDescription, q_start, dq, duration: float, gamma: float = 0.05,
                   dt: float = 0.008, tail: float = 0.5) -> np.ndarray:
    """Low-level-planner trajectory from rest to rest, resampled at the control step.

    A hold segment of ``tail`` seconds is appended so settling counts too.
    """
    q_start = np.asarray(q_start, dtype=float)
    q_end = q_start + np.asarray(dq, dtype=float)
    K = horizon_steps(0.0, duration, gamma)
    U = np.empty((K, N_JOINTS))
    for i in range(N_JOINTS):
        rep = solve_qp(joint_qp(q_start[i], 0.0, q_end[i], K, gamma,
                                desc.q_max[i], desc.v_max[i], desc.a_max[i]), tol=1e-9)
        if not rep.ok:
            raise PlanningError("qp_infeasible", f"reference for joint {i}: {rep.status}", joint=i)
        U[:, i] = rep.x_star
    qs, qds = rollout(q_start, np.zeros(N_JOINTS), U, gamma)
    t = np.arange(int(round((K * gamma + tail) / dt)) + 1) * dt
    k = np.minimum((t / gamma).astype(int), K - 1)
    s = np.clip(t - k * gamma, 0.0, gamma)[:, None]
    out = qs[k] + qds[k] * s + 0.5 * U[k] * s * s
    out[t >= K * gamma] = qs[-1]
    return out


def _random_signs(rng, n):
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def training_trajectories(desc: RobotDescription, rng: np.random.Generator, count: int,
                          q_start=None, dq_bounds=TRAIN_DQ, durations=TRAIN_DURATIONS, **kw):
    """Random point-to-point references with ``|dq| <= dq_bounds``."""
    q_start = np.zeros(N_JOINTS) if q_start is None else np.asarray(q_start, float)
    for _ in range(count):
        dq = rng.uniform(-1.0, 1.0, N_JOINTS) * dq_bounds
        T = float(durations[rng.integers(len(durations))])
        yield point_to_point(desc, q_start, dq, T, **kw)


def held_out_trajectories(desc: RobotDescription, rng: np.random.Generator, count: int = 10,
                      q_start=None, dq=TEST_DQ, duration: float = TEST_DURATION, **kw):
    """Held-out references: fixed magnitudes, random directions, faster than training."""
    q_start = np.zeros(N_JOINTS) if q_start is None else np.asarray(q_start, float)
    for _ in range(count):
        yield point_to_point(desc, q_start, _random_signs(rng, N_JOINTS) * dq, duration, **kw)


def held_out_rmse(cfg: PlantConfig, desc: RobotDescription, model: "MlpModel", seed: int = 1000,
                  count: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint tracking RMSE on held-out references, without and with pre-shaping.

    Both arrays have shape ``(count, 8)``.
    """
    rng = np.random.default_rng(seed)
    base, shaped = [], []
    for y_d in held_out_trajectories(desc, rng, count, dt=cfg.dt):
        base.append(tracking_rmse(run_closed_loop(cfg, y_d)[0], y_d))
        shaped.append(tracking_rmse(run_closed_loop(cfg, y_d, model)[0], y_d))
    return np.array(base), np.array(shaped)


# -- dataset ----------------------------------------------------------------

@dataclass
class TrainingSet:
    """Per-joint input pairs ``X[j]`` (n, 2) and targets ``y[j]`` (n,), with a split."""

    X: list
    y: list
    train_idx: list
    val_idx: list
    lookahead: np.ndarray

    def sizes(self) -> list[int]:
        return [len(t) for t in self.y]


def extract_pairs(q, refs, r: int, joint: int):
    """Offset pairs from one recording.

    The achieved output plays the role of the desired one: inputs are
    ``(q[k] - q[k+1], q[k+r] - q[k+1])`` and the target is the applied
    reference ``refs[k] - q[k+1]`` (the reference sent at step ``k``).
    """
    q = np.asarray(q)[:, joint]
    y = np.asarray(refs)[:, joint]
    n = len(q) - r
    if n <= 0:
        return np.zeros((0, 2)), np.zeros(0)
    k = np.arange(n)
    base = q[k + 1]
    X = np.column_stack([q[k] - base, q[k + r] - base])
    return X, y[k] - base


def collect_dataset(cfg: PlantConfig, desc: RobotDescription, seed: int = 0, n_trajectories: int = 8,
                    val_fraction: float = 0.2, min_pairs: int = 1000, trajectories=None) -> TrainingSet:
    """Run the baseline loop over generated references and assemble per-joint pairs."""
    rng = np.random.default_rng(seed)
    if trajectories is None:
        trajectories = list(training_trajectories(desc, rng, n_trajectories, dt=cfg.dt))
    r = cfg.relative_degree
    Xs = [[] for _ in range(N_JOINTS)]
    ys = [[] for _ in range(N_JOINTS)]
    for y_d in trajectories:
        q, refs = run_closed_loop(cfg, y_d)
        for j in range(N_JOINTS):
            X, y = extract_pairs(q, refs, int(r[j]), j)
            Xs[j].append(X)
            ys[j].append(y)
    X = [np.vstack(x) for x in Xs]
    y = [np.concatenate(t) for t in ys]
    if min(len(t) for t in y) < min_pairs:
        raise TrainingError(f"only {min(len(t) for t in y)} pairs per joint, need {min_pairs}")
    split_rng = np.random.default_rng([seed, 1])
    tr, va = [], []
    for t in y:
        perm = split_rng.permutation(len(t))
        n_val = int(round(val_fraction * len(t)))
        va.append(np.sort(perm[:n_val]))
        tr.append(np.sort(perm[n_val:]))
    return TrainingSet(X, y, tr, va, r.copy())


# -- network --------------------------------------------------------------

def init_params(rng: np.random.Generator, sizes=(2,) + HIDDEN + (1,)) -> list[np.ndarray]:
    """Weights ``[W1, b1, W2, b2, W3, b3]``: He-initialised hidden layers, zero output layer.

    The zero output layer makes an untrained net a pass-through, and a net
    trained on all-zero targets stays exactly there.
    """
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params.append(rng.normal(0.0, math.sqrt(2.0 / a), (a, b)))
        params.append(np.zeros(b))
    params[-2][:] = 0.0
    return params


def mlp_forward(params, X):
    """Forward pass; returns output (n,) and the cache needed for backprop."""
    h = np.asarray(X, dtype=float)
    acts = [h]
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    return h[:, 0], acts


def mlp_loss_grad(params, X, y):
    """Mean squared error and its gradient with respect to every parameter."""
    out, acts = mlp_forward(params, X)
    n = len(y)
    err = out - y
    loss = float(np.mean(err * err))
    delta = (2.0 / n) * err[:, None]
    grads = [None] * len(params)
    for i in reversed(range(len(params) // 2)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ params[2 * i].T) * (acts[i] > 0)
    return loss, grads


@dataclass
class JointNet:
    params: list
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def __call__(self, X) -> np.ndarray:
        Xn = (np.atleast_2d(X) - self.x_mean) / self.x_std
        out, _ = mlp_forward(self.params, Xn)
        return out * self.y_std + self.y_mean

    @classmethod
    def zero(cls) -> "JointNet":
        params = [np.zeros(s) for s in ((2, 10), (10,), (10, 10), (10,), (10, 1), (1,))]
        return cls(params, np.zeros(2), np.ones(2), 0.0, 1.0)


@dataclass
class MlpModel:
    nets: list
    lookahead: np.ndarray

    def __post_init__(self):
        self.lookahead = np.asarray(self.lookahead, int).reshape(N_JOINTS)
        self._stack()

    def _stack(self):
        # stacked copies for one-shot evaluation of all joints
        self._W = [np.stack([n.params[i] for n in self.nets]) for i in range(len(self.nets[0].params))]
        self._xm = np.stack([n.x_mean for n in self.nets])
        self._xs = np.stack([n.x_std for n in self.nets])
        self._ym = np.array([n.y_mean for n in self.nets])
        self._ys = np.array([n.y_std for n in self.nets])

    def all_joints(self, X) -> np.ndarray:
        """Evaluate joint ``j``'s network on row ``X[j]``; ``X`` is (8, 2)."""
        h = (np.asarray(X, float) - self._xm) / self._xs
        W = self._W
        n_layers = len(W) // 2
        for i in range(n_layers):
            h = np.einsum("ja,jab->jb", h, W[2 * i]) + W[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h[:, 0] * self._ys + self._ym

    @classmethod
    def zero(cls, lookahead) -> "MlpModel":
        return cls([JointNet.zero() for _ in range(N_JOINTS)], lookahead)

    def finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for n in self.nets for p in n.params)


def preshape(model: MlpModel, q_k, y_d_future, y_d_next, q_max=None) -> np.ndarray:
    """Modified reference ``y_d_next + NN(q_k - y_d_next, y_d_future - y_d_next)``."""
    q_k, y_d_future, y_d_next = (np.asarray(a, dtype=float) for a in (q_k, y_d_future, y_d_next))
    X = np.column_stack([q_k - y_d_next, y_d_future - y_d_next])
    out = y_d_next + model.all_joints(X)
    if q_max is not None:
        out = np.clip(out, -q_max, q_max)
    return out


@dataclass
class TrainOptions:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    diverge_factor: float = 10.0
    # Std of Gaussian noise added to the first input during training, relative
    # to the spread of the second. In recorded data the first input is just the
    # output velocity, collinear with the second; at run time it also carries
    # the tracking error. The noise keeps the net from leaning on it.
    input_noise: float = 1.0


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)  # per joint, per epoch (normalised MSE)
    val_loss: list = field(default_factory=list)

    def final_val(self) -> np.ndarray:
        return np.array([v[-1] for v in self.val_loss])


def _std(a):
    s = np.std(a, axis=0)
    return np.where(s > 1e-12, s, 1.0)


def train_joint(X_tr, y_tr, X_va, y_va, opts: TrainOptions, rng: np.random.Generator):
    """Adam on minibatches; returns the net and its loss curves."""
    sigma = opts.input_noise * float(np.std(X_tr[:, 1]))
    x_mean = X_tr.mean(axis=0)
    x_std = _std(X_tr)
    x_std[0] = math.sqrt(x_std[0] ** 2 + sigma ** 2)
    y_mean, y_std = float(np.mean(y_tr)), float(_std(y_tr))
    Xn, yn = (X_tr - x_mean) / x_std, (y_tr - y_mean) / y_std
    noise_n = sigma / x_std[0]
    Xv, yv = (X_va - x_mean) / x_std, (y_va - y_mean) / y_std
    params = init_params(rng)
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = opts.beta1, opts.beta2

    def val_loss():
        if not len(yv):
            return float("nan")
        out, _ = mlp_forward(params, Xv)
        return float(np.mean((out - yv) ** 2))

    initial = val_loss()
    tr_curve, va_curve = [], []
    t = 0
    for epoch in range(opts.epochs):
        perm = rng.permutation(len(yn))
        total = 0.0
        for s in range(0, len(perm), opts.batch_size):
            idx = perm[s:s + opts.batch_size]
            xb = Xn[idx]
            if noise_n > 0:
                xb = xb.copy()
                xb[:, 0] += noise_n * rng.standard_normal(len(idx))
            loss, grads = mlp_loss_grad(params, xb, yn[idx])
            total += loss * len(idx)
            t += 1
            for i, g in enumerate(grads):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mh = m[i] / (1 - b1 ** t)
                vh = v[i] / (1 - b2 ** t)
                params[i] = params[i] - opts.lr * mh / (np.sqrt(vh) + opts.eps)
        tr_curve.append(total / len(yn))
        va_curve.append(val_loss())
        if not np.isfinite(tr_curve[-1]) or va_curve[-1] > opts.diverge_factor * initial:
            raise TrainingError(f"diverged at epoch {epoch + 1}: train {tr_curve[-1]:.3g}, "
                                f"val {va_curve[-1]:.3g}, initial val {initial:.3g}")
    return JointNet(params, x_mean, x_std, y_mean, y_std), tr_curve, va_curve


def train(data: TrainingSet, opts: TrainOptions | None = None) -> tuple[MlpModel, TrainReport]:
    opts = opts or TrainOptions()
    if min(data.sizes()) == 0:
        raise TrainingError("empty training set")
    nets, report = [], TrainReport()
    for j in range(len(data.y)):
        rng = np.random.default_rng([opts.seed, j])
        X, y = data.X[j], data.y[j]
        tr, va = data.train_idx[j], data.val_idx[j]
        try:
            net, tc, vc = train_joint(X[tr], y[tr], X[va], y[va], opts, rng)
        except TrainingError as exc:
            raise TrainingError(f"joint {j}: {exc}") from None
        nets.append(net)
        report.train_loss.append(tc)
        report.val_loss.append(vc)
    return MlpModel(nets, data.lookahead), report


# -- persistence ------------------------------------------------------------

def save_model(path: str | Path, model: MlpModel, joints=None) -> None:
    """Write the networks of ``joints`` (default all) to one npz file."""
    joints = range(N_JOINTS) if joints is None else [int(j) for j in joints]
    arrays = {"format": np.array(MODEL_FORMAT), "version": np.array(MODEL_VERSION),
              "hidden": np.array(HIDDEN), "lookahead": model.lookahead, "joints": np.array(list(joints))}
    for j in joints:
        net = model.nets[j]
        for i, p in enumerate(net.params):
            arrays[f"j{j}_p{i}"] = p
        arrays[f"j{j}_x_mean"] = net.x_mean
        arrays[f"j{j}_x_std"] = net.x_std
        arrays[f"j{j}_y"] = np.array([net.y_mean, net.y_std])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(paths) -> MlpModel:
    """Load a model from one file or from several (e.g. per-joint) files covering all joints."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    nets: dict = {}
    lookahead = None
    for path in paths:
        with np.load(path, allow_pickle=False) as z:
            if "format" not in z or str(z["format"]) != MODEL_FORMAT or int(z["version"]) != MODEL_VERSION:
                raise ValueError(f"{path}: not a version-{MODEL_VERSION} model file")
            if tuple(z["hidden"]) != HIDDEN:
                raise ValueError(f"{path}: unsupported architecture {tuple(z['hidden'])}")
            lookahead = z["lookahead"]
            joints = z["joints"] if "joints" in z else range(N_JOINTS)
            for j in joints:
                params = [z[f"j{j}_p{i}"] for i in range(2 * (len(HIDDEN) + 1))]
                ym, ys = z[f"j{j}_y"]
                nets[int(j)] = JointNet(params, z[f"j{j}_x_mean"], z[f"j{j}_x_std"], float(ym), float(ys))
    missing = sorted(set(range(N_JOINTS)) - set(nets))
    if missing:
        raise ValueError(f"no network for joints {missing}")
    model = MlpModel([nets[j] for j in range(N_JOINTS)], lookahead)
    if not model.finite():
        raise ValueError("non-finite parameters")
    return model
