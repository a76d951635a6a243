"""Drag-aware Kalman filter for the ball state from position measurements."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .ballistics import BallState, DragModel

H = np.hstack([np.eye(3), np.zeros((3, 3))])


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    t: float

    def ball_state(self) -> BallState:
        return BallState(self.mean[:3], self.mean[3:], self.t)


@dataclass(frozen=True)
class NoiseConfig:
    """Per-step process noise ``Q`` (6x6) and position measurement noise ``R`` (3x3)."""

    Q: np.ndarray
    R: np.ndarray

    @classmethod
    def default(cls, dt: float = 0.01, sigma_a: float = 0.5, sigma_z: float = 0.002) -> "NoiseConfig":
        return cls(white_accel_q(dt, sigma_a), sigma_z ** 2 * np.eye(3))


def white_accel_q(dt: float, sigma_a: float) -> np.ndarray:
    """Discrete white-acceleration process noise for one step of length ``dt``."""
    I = np.eye(3)
    return sigma_a ** 2 * np.block([[dt ** 4 / 4 * I, dt ** 3 / 2 * I],
                                    [dt ** 3 / 2 * I, dt ** 2 * I]])


def transition(model: DragModel, mean, dk: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean map of the drag-aware prediction step and its Jacobian."""
    b, v = mean[:3], mean[3:]
    speed = float(np.linalg.norm(v))
    acc = -model.K_D * speed * v
    acc[2] -= model.g
    new = np.r_[b + dk * v + 0.5 * dk * dk * acc, v + dk * acc]
    if speed > 0:
        dacc = -model.K_D * (speed * np.eye(3) + np.outer(v, v) / speed)
    else:
        dacc = np.zeros((3, 3))
    F = np.eye(6)
    F[:3, 3:] = dk * np.eye(3) + 0.5 * dk * dk * dacc
    F[3:, 3:] += dk * dacc
    return new, F


def kf_predict(state: FilterState, model: DragModel, dk: float, Q: np.ndarray | None = None) -> FilterState:
    mean, F = transition(model, state.mean, dk)
    cov = F @ state.cov @ F.T
    if Q is not None:
        cov = cov + Q
    return FilterState(mean, 0.5 * (cov + cov.T), state.t + dk)


def kf_update(state: FilterState, z, noise: NoiseConfig) -> FilterState:
    """Linear position update with Joseph-form covariance."""
    post, _ = kf_update_nis(state, z, noise.R)
    return post


def kf_update_nis(state: FilterState, z, R):
    """Update with measurement covariance ``R``; also returns the normalised innovation squared."""
    z = np.asarray(z, dtype=float)
    P = state.cov
    innov = z - state.mean[:3]
    S = P[:3, :3] + R
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance is singular") from None
    if not np.all(np.isfinite(S_inv)):
        raise FilterError("innovation covariance is singular")
    K = P[:, :3] @ S_inv
    mean = state.mean + K @ innov
    IKH = np.eye(6) - K @ H
    cov = IKH @ P @ IKH.T + K @ R @ K.T
    nis = float(innov @ S_inv @ innov)
    return FilterState(mean, 0.5 * (cov + cov.T), state.t), nis


def two_point_init(z0, t0: float, z1, t1: float, noise: NoiseConfig,
                   vel_var: float = 10.0) -> FilterState:
    """Position from the second measurement, velocity by finite difference."""
    z0, z1 = np.asarray(z0, float), np.asarray(z1, float)
    mean = np.r_[z1, (z1 - z0) / (t1 - t0)]
    cov = np.zeros((6, 6))
    cov[:3, :3] = noise.R
    cov[3:, 3:] = vel_var * np.eye(3)
    return FilterState(mean, cov, float(t1))


class BallTracker:
    """Predict/update driver: one instance per ball.

    Process noise is scaled to the actual gap between measurements using a
    white-acceleration model with ``sigma_a``.
    """

    def __init__(self, model: DragModel, noise: NoiseConfig, sigma_a: float | None = 0.5):
        self.model = model
        self.noise = noise
        self.sigma_a = sigma_a
        self.state: FilterState | None = None
        self._first: tuple[np.ndarray, float] | None = None
        self.nis: list[float] = []

    def _Q(self, dk: float) -> np.ndarray:
        if self.sigma_a is None:
            return self.noise.Q
        return white_accel_q(dk, self.sigma_a)

    def step(self, z, t: float) -> FilterState | None:
        z = np.asarray(z, dtype=float)
        if self.state is None:
            if self._first is None:
                self._first = (z, t)
                return None
            z0, t0 = self._first
            if t <= t0:
                raise FilterError("measurement timestamps must be strictly increasing")
            self.state = two_point_init(z0, t0, z, t, self.noise)
            return self.state
        if t <= self.state.t:
            raise FilterError("measurement timestamps must be strictly increasing")
        dk = t - self.state.t
        prior = kf_predict(self.state, self.model, dk, self._Q(dk))
        self.state, nis = kf_update_nis(prior, z, self.noise.R)
        self.nis.append(nis)
        return self.state


def track(measurements: Iterable[tuple[float, np.ndarray]], model: DragModel, noise: NoiseConfig,
          init: FilterState) -> Iterator[FilterState]:
    """Alternate prediction over each gap with an update; yields each posterior.

    ``measurements`` are ``(t, z)`` pairs with strictly increasing ``t`` > ``init.t``.
    ``noise.Q`` is applied once per prediction.
    """
    state = init
    for t, z in measurements:
        dk = t - state.t
        if dk <= 0:
            raise FilterError("measurement timestamps must be strictly increasing")
        state = kf_update(kf_predict(state, model, dk, noise.Q), z, noise)
        yield state
