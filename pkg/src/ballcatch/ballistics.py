"""Ball flight under gravity and quadratic drag.

Covers the point-mass flight model, fixed-step trajectory prediction with
Hermite queries between grid points, offline drag-coefficient identification by
recursive least squares, and synthetic throw generation by shooting.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

G = 9.81
KD_DEFAULT = 0.0238


class PredictionError(ValueError):
    pass


class IdentifiabilityError(ValueError):
    pass


class ThrowError(RuntimeError):
    """Shooting did not converge to the requested terminal point."""


@dataclass(frozen=True)
class DragModel:
    K_D: float = KD_DEFAULT
    g: float = G

    def __post_init__(self):
        if self.K_D < 0 or self.g < 0:
            raise ValueError("K_D and g must be nonnegative")


@dataclass(frozen=True)
class BallState:
    b: np.ndarray
    b_dot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))
        object.__setattr__(self, "b_dot", np.asarray(self.b_dot, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.b_dot)) and math.isfinite(self.t)):
            raise ValueError("ball state must be finite")

    def as_vector(self) -> np.ndarray:
        return np.r_[self.b, self.b_dot]


@dataclass(frozen=True)
class OriginRegion:
    """Throw origins: uniform over a horizontal disk, height uniform in a band."""

    center: tuple[float, float] = (3.0, 0.0)
    radius: float = 0.5
    z_min: float = 1.0
    z_max: float = 1.6

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        r = self.radius * math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * math.pi)
        return np.array([self.center[0] + r * math.cos(phi),
                         self.center[1] + r * math.sin(phi),
                         rng.uniform(self.z_min, self.z_max)])


def ball_accel(model: DragModel, b_dot) -> np.ndarray:
    v = np.asarray(b_dot, dtype=float)
    acc = -model.K_D * np.linalg.norm(v) * v
    acc[2] -= model.g
    return acc


def _rk4(x, y, z, vx, vy, vz, n, h, kd, g):
    # Scalar kernel: much faster than numpy for 3-vectors in a tight loop.
    out = [(x, y, z, vx, vy, vz)]
    sqrt = math.sqrt
    h2 = 0.5 * h
    h6 = h / 6.0
    for _ in range(n):
        s = kd * sqrt(vx * vx + vy * vy + vz * vz)
        a1x, a1y, a1z = -s * vx, -s * vy, -s * vz - g
        ux, uy, uz = vx + h2 * a1x, vy + h2 * a1y, vz + h2 * a1z
        s = kd * sqrt(ux * ux + uy * uy + uz * uz)
        a2x, a2y, a2z = -s * ux, -s * uy, -s * uz - g
        wx, wy, wz = vx + h2 * a2x, vy + h2 * a2y, vz + h2 * a2z
        s = kd * sqrt(wx * wx + wy * wy + wz * wz)
        a3x, a3y, a3z = -s * wx, -s * wy, -s * wz - g
        px, py, pz = vx + h * a3x, vy + h * a3y, vz + h * a3z
        s = kd * sqrt(px * px + py * py + pz * pz)
        a4x, a4y, a4z = -s * px, -s * py, -s * pz - g
        x += h6 * (vx + 2.0 * ux + 2.0 * wx + px)
        y += h6 * (vy + 2.0 * uy + 2.0 * wy + py)
        z += h6 * (vz + 2.0 * uz + 2.0 * wz + pz)
        vx += h6 * (a1x + 2.0 * a2x + 2.0 * a3x + a4x)
        vy += h6 * (a1y + 2.0 * a2y + 2.0 * a3y + a4y)
        vz += h6 * (a1z + 2.0 * a2z + 2.0 * a3z + a4z)
        out.append((x, y, z, vx, vy, vz))
    return out


def _euler(x, y, z, vx, vy, vz, n, h, kd, g):
    out = [(x, y, z, vx, vy, vz)]
    sqrt = math.sqrt
    for _ in range(n):
        s = kd * sqrt(vx * vx + vy * vy + vz * vz)
        ax, ay, az = -s * vx, -s * vy, -s * vz - g
        x, y, z = x + h * vx, y + h * vy, z + h * vz
        vx, vy, vz = vx + h * ax, vy + h * ay, vz + h * az
        out.append((x, y, z, vx, vy, vz))
    return out


def integrate(model: DragModel, state6, n_steps: int, dt: float, method: str = "rk4") -> np.ndarray:
    """Integrate ``n_steps`` fixed steps; returns an ``(n_steps + 1, 6)`` array."""
    kernel = {"rk4": _rk4, "euler": _euler}[method]
    x = [float(v) for v in state6]
    return np.array(kernel(*x, int(n_steps), float(dt), model.K_D, model.g))


@dataclass(frozen=True)
class BallPrediction:
    """States on the grid ``t0 + k * dt``; ``pos`` and ``vel`` are ``(n, 3)``."""

    t0: float
    dt: float
    pos: np.ndarray
    vel: np.ndarray
    model: DragModel = field(default_factory=DragModel)

    @property
    def t_end(self) -> float:
        return self.t0 + (len(self.pos) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.pos))

    @property
    def states(self) -> list[BallState]:
        return [BallState(p, v, t) for p, v, t in zip(self.pos, self.vel, self.times)]

    def __len__(self) -> int:
        return len(self.pos)


def predict(model: DragModel, s0: BallState, horizon: float, dt: float = 1e-3,
            method: str = "rk4") -> BallPrediction:
    """Fixed-step prediction of the flight from ``s0`` covering at least ``horizon`` seconds."""
    if dt <= 0:
        raise PredictionError("dt must be positive")
    if horizon < dt:
        raise PredictionError("horizon shorter than one step")
    n = int(math.ceil(horizon / dt - 1e-9))
    traj = integrate(model, s0.as_vector(), n, dt, method)
    return BallPrediction(float(s0.t), float(dt), traj[:, :3], traj[:, 3:], model)


def query(pred: BallPrediction, t: float) -> BallState:
    """Cubic Hermite interpolation between grid points; exact on the grid."""
    b, v = query_arrays(pred, t)
    return BallState(b, v, t)


def query_arrays(pred: BallPrediction, t: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(pred.pos)
    s = (t - pred.t0) / pred.dt
    if s < -1e-9 or s > n - 1 + 1e-9:
        raise PredictionError(f"t={t:.6f} outside prediction [{pred.t0:.6f}, {pred.t_end:.6f}]")
    k = min(max(int(math.floor(s)), 0), n - 2)
    u = s - k
    if u <= 1e-12:
        return pred.pos[k].copy(), pred.vel[k].copy()
    if u >= 1.0 - 1e-12:
        return pred.pos[k + 1].copy(), pred.vel[k + 1].copy()
    h = pred.dt
    p0, p1 = pred.pos[k], pred.pos[k + 1]
    m0, m1 = pred.vel[k] * h, pred.vel[k + 1] * h
    u2, u3 = u * u, u * u * u
    pos = ((2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0
           + (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1)
    dpos = ((6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0
            + (-6 * u2 + 6 * u) * p1 + (3 * u2 - 2 * u) * m1) / h
    return pos, dpos


# -- drag identification ---------------------------------------------------

def drag_regression(toss: Sequence[BallState], g: float = G, min_speed: float = 0.5):
    """Scalar regression samples ``(phi, y)`` with ``y = K_D * phi`` for one toss.

    Acceleration comes from central differences of the recorded velocities and
    is projected on the velocity direction.
    """
    t = np.array([s.t for s in toss])
    v = np.array([s.b_dot for s in toss])
    if len(t) < 3:
        return np.empty(0), np.empty(0)
    acc = (v[2:] - v[:-2]) / (t[2:] - t[:-2])[:, None]
    vm = v[1:-1]
    speed = np.linalg.norm(vm, axis=1)
    keep = speed >= min_speed
    acc, vm, speed = acc[keep], vm[keep], speed[keep]
    acc[:, 2] += g
    y = -np.einsum("ij,ij->i", acc, vm) / speed
    return speed ** 2, y


def estimate_drag(tosses: Iterable[Sequence[BallState]], g: float = G, forgetting: float = 1.0,
                  min_speed: float = 0.5, min_samples: int = 10) -> DragModel:
    """Recursive least-squares fit of the drag coefficient over recorded tosses."""
    k_hat, P = 0.0, 1e6
    used = 0
    for toss in tosses:
        times = [s.t for s in toss]
        if len(toss) < 3 or any(b <= a for a, b in zip(times, times[1:])):
            raise IdentifiabilityError("each toss needs >= 3 strictly time-ordered samples")
        phi, y = drag_regression(toss, g, min_speed)
        for ph, yy in zip(phi, y):
            gain = P * ph / (forgetting + ph * P * ph)
            k_hat += gain * (yy - ph * k_hat)
            P = (P - gain * ph * P) / forgetting
            used += 1
    if used < min_samples:
        raise IdentifiabilityError(f"only {used} usable samples (need {min_samples})")
    return DragModel(max(k_hat, 0.0), g)


def read_toss_csv(path: str | Path) -> list[BallState]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"t", "bx", "by", "bz", "vx", "vy", "vz"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [BallState([float(r["bx"]), float(r["by"]), float(r["bz"])],
                          [float(r["vx"]), float(r["vy"]), float(r["vz"])], float(r["t"]))
                for r in reader]


def write_toss_csv(path: str | Path, toss: Sequence[BallState]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bx", "by", "bz", "vx", "vy", "vz"])
        for s in toss:
            w.writerow([repr(float(s.t)), *map(repr, map(float, s.b)), *map(repr, map(float, s.b_dot))])


def simulate_toss(model: DragModel, s0: BallState, duration: float, rate: float,
                  velocity_noise: float = 0.0, rng: np.random.Generator | None = None,
                  dt: float = 1e-3) -> list[BallState]:
    """Record a toss at ``rate`` Hz, optionally with additive velocity noise."""
    stride = int(round(1.0 / (rate * dt)))
    n = int(round(duration / dt))
    traj = integrate(model, s0.as_vector(), n, dt)[::stride]
    if velocity_noise > 0:
        rng = rng or np.random.default_rng()
        traj[:, 3:] += velocity_noise * rng.standard_normal(traj[:, 3:].shape)
    t = s0.t + dt * stride * np.arange(len(traj))
    return [BallState(row[:3], row[3:], ti) for row, ti in zip(traj, t)]


# -- throw synthesis -------------------------------------------------------

def shoot(model: DragModel, origin, target, flight_time: float, dt: float = 1e-3,
          tol: float = 1e-3, max_iter: int = 50) -> tuple[np.ndarray, int]:
    """Fixed-point shooting for the launch velocity reaching ``target`` at ``flight_time``.

    Returns ``(velocity, iterations)``; raises ThrowError when not converged.
    """
    origin = np.asarray(origin, dtype=float)
    target = np.asarray(target, dtype=float)
    T = float(flight_time)
    v = (target - origin) / T
    v[2] += 0.5 * model.g * T
    n = int(round(T / dt))
    h = T / n
    for it in range(1, max_iter + 1):
        end = _rk4(*origin, *v, n, h, model.K_D, model.g)[-1]
        err = target - np.array(end[:3])
        if np.linalg.norm(err) <= tol:
            return v, it
        v = v + err / T
    raise ThrowError(f"shooting did not converge in {max_iter} iterations")


def synthesize_throw(rng_seed, target_point, flight_time: float,
                     origin_region: OriginRegion = OriginRegion(),
                     model: DragModel = DragModel(), dt: float = 1e-3) -> BallState:
    """Sample an origin and solve for the launch velocity hitting ``target_point``.

    Deterministic for a given seed (int or ``SeedSequence``).
    """
    if flight_time <= 0:
        raise ValueError("flight_time must be positive")
    rng = np.random.default_rng(rng_seed)
    origin = origin_region.sample(rng)
    v, _ = shoot(model, origin, target_point, flight_time, dt)
    return BallState(origin, v, 0.0)


def query_batch(pred: BallPrediction, ts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Hermite query; times are clipped into the prediction window."""
    ts = np.asarray(ts, dtype=float)
    n = len(pred.pos)
    s = np.clip((ts - pred.t0) / pred.dt, 0.0, n - 1)
    k = np.minimum(np.floor(s).astype(int), n - 2)
    u = (s - k)[:, None]
    h = pred.dt
    p0, p1 = pred.pos[k], pred.pos[k + 1]
    m0, m1 = pred.vel[k] * h, pred.vel[k + 1] * h
    u2, u3 = u * u, u * u * u
    pos = ((2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0
           + (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1)
    vel = ((6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0
           + (-6 * u2 + 6 * u) * p1 + (3 * u2 - 2 * u) * m1) / h
    return pos, vel
