"""Kinematic model of the 8-DoF mobile manipulator.

Joint ordering is fixed: six revolute arm joints (rad) followed by the planar
base coordinates ``x_b, y_b`` (m). Every function accepting a joint vector also
accepts a stack of them with shape ``(..., 8)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

N_JOINTS = 8
N_ARM = 6
FORMAT_VERSION = 1


class DescriptionError(ValueError):
    """Raised when a robot description file is malformed."""


def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def homogeneous(rotation: np.ndarray, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


@dataclass(frozen=True)
class RobotDescription:
    """Chain parameters, limits and collision cylinder.

    ``dh`` holds one row ``(theta_offset, d, a, alpha)`` per arm joint in the
    standard DH convention. Limits are symmetric, stored as positive maxima.
    """

    dh: np.ndarray
    base_to_arm: np.ndarray
    ee_transform: np.ndarray
    q_max: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray
    R_coll: float
    H_coll: float
    name: str = "robot"

    def __post_init__(self):
        dh = np.asarray(self.dh, dtype=float)
        if dh.shape != (N_ARM, 4):
            raise DescriptionError(f"dh table must be 6x4, got {dh.shape}")
        for key in ("q_max", "v_max", "a_max"):
            arr = np.asarray(getattr(self, key), dtype=float)
            if arr.shape != (N_JOINTS,):
                raise DescriptionError(f"{key} must have 8 entries")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise DescriptionError(f"{key} entries must be finite and > 0")
            object.__setattr__(self, key, arr)
        if not (self.R_coll > 0 and self.H_coll > 0):
            raise DescriptionError("collision cylinder dimensions must be > 0")
        object.__setattr__(self, "dh", dh)
        object.__setattr__(self, "base_to_arm", np.asarray(self.base_to_arm, dtype=float))
        object.__setattr__(self, "ee_transform", np.asarray(self.ee_transform, dtype=float))

    @property
    def q_min(self) -> np.ndarray:
        return -self.q_max

    @property
    def v_min(self) -> np.ndarray:
        return -self.v_max

    @property
    def a_min(self) -> np.ndarray:
        return -self.a_max

    def with_cylinder(self, R_coll: float, H_coll: float) -> "RobotDescription":
        return RobotDescription(self.dh, self.base_to_arm, self.ee_transform, self.q_max,
                                self.v_max, self.a_max, R_coll, H_coll, self.name)


@dataclass(frozen=True)
class EePose:
    p_world: np.ndarray
    z_axis_world: np.ndarray
    p_arm: np.ndarray


def _parse(doc: dict) -> RobotDescription:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DescriptionError(f"unsupported format_version {doc.get('format_version')!r}")
    try:
        units = doc.get("units", {})
        ang = np.pi / 180.0 if units.get("angle", "deg") == "deg" else 1.0
        chain = doc["arm_chain"]
        dh = np.column_stack([
            np.asarray(chain.get("theta_offset", [0.0] * N_ARM), float) * ang,
            np.asarray(chain["d"], float),
            np.asarray(chain["a"], float),
            np.asarray(chain["alpha"], float) * ang,
        ])
        mounts = []
        for key in ("base_to_arm", "ee_transform"):
            tbl = doc.get(key, {})
            rpy = np.asarray(tbl.get("rpy", [0.0, 0.0, 0.0]), float) * ang
            mounts.append(homogeneous(_rpy_matrix(rpy), tbl.get("translation", [0.0, 0.0, 0.0])))
        lim = doc["limits"]
        q_max = np.r_[np.asarray(lim["arm_position"], float) * ang, lim["base_position"]]
        v_max = np.r_[np.asarray(lim["arm_velocity"], float) * ang, lim["base_velocity"]]
        a_max = np.r_[np.asarray(lim["arm_acceleration"], float) * ang, lim["base_acceleration"]]
        coll = doc["collision"]
        return RobotDescription(dh, mounts[0], mounts[1], q_max, v_max, a_max,
                                float(coll["radius"]), float(coll["height"]),
                                doc.get("name", "robot"))
    except KeyError as exc:
        raise DescriptionError(f"missing key {exc}") from None


def load_description(path: str | Path | None = None) -> RobotDescription:
    """Load a robot description TOML file; ``None`` loads the bundled UR10 default."""
    if path is None:
        text = resources.files("ballcatch.data").joinpath("ur10_ridgeback.toml").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise DescriptionError(str(exc)) from None
    return _parse(doc)


_DEFAULT: RobotDescription | None = None


def default_description() -> RobotDescription:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_description()
    return _DEFAULT


def _dh_transforms(dh: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-joint DH transforms Rz(theta) Tz(d) Tx(a) Rx(alpha); ``theta`` is (N, 6)."""
    th = theta + dh[:, 0]
    ct, st = np.cos(th), np.sin(th)
    d, a, alpha = dh[:, 1], dh[:, 2], dh[:, 3]
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(th.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def fk_batch(desc: RobotDescription, Q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward kinematics for a stack of configurations.

    Returns ``(p_world, z_world, p_arm)`` each of shape ``(N, 3)``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    A = _dh_transforms(desc.dh, Q[:, :N_ARM])
    T = A[:, 0]
    for j in range(1, N_ARM):
        T = T @ A[:, j]
    T = T @ desc.ee_transform
    p_arm = T[:, :3, 3]
    W = desc.base_to_arm @ T
    p_world = W[:, :3, 3].copy()
    p_world[:, 0] += Q[:, 6]
    p_world[:, 1] += Q[:, 7]
    return p_world, W[:, :3, 2].copy(), p_arm.copy()


def forward_kinematics(desc: RobotDescription, q) -> EePose:
    p_world, z_world, p_arm = fk_batch(desc, q)
    return EePose(p_world[0], z_world[0], p_arm[0])


def collision_ok(desc: RobotDescription, q) -> bool:
    return cylinder_contains(desc, forward_kinematics(desc, q).p_arm)


def cylinder_contains(desc: RobotDescription, p_arm) -> bool:
    x, y, z = p_arm
    return bool(x * x + y * y <= desc.R_coll ** 2 and 0.0 <= z <= desc.H_coll)


def within_limits(desc: RobotDescription, q, qd, u, slack: float = 1e-9) -> bool:
    """Componentwise box check on position, velocity and acceleration."""
    q, qd, u = (np.asarray(v, dtype=float) for v in (q, qd, u))
    return bool(
        np.all(np.abs(q) <= desc.q_max + slack)
        and np.all(np.abs(qd) <= desc.v_max + slack)
        and np.all(np.abs(u) <= desc.a_max + slack)
    )
