import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ballcatch.robot_model import (DescriptionError, RobotDescription, collision_ok, cylinder_contains,
                                   fk_batch, forward_kinematics, load_description, within_limits)
from conftest import random_q


def _rot(axis, a):
    c, s = np.cos(a), np.sin(a)
    R = np.eye(4)
    i, j = {"x": (1, 2), "z": (0, 1)}[axis]
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def _trans(x, y, z):
    T = np.eye(4)
    T[:3, 3] = x, y, z
    return T


def naive_fk(desc, q):
    """Plain 4x4 product, one elementary transform at a time."""
    T = _trans(q[6], q[7], 0.0) @ desc.base_to_arm
    for (off, d, a, alpha), th in zip(desc.dh, q[:6]):
        T = T @ _rot("z", th + off) @ _trans(0, 0, d) @ _trans(a, 0, 0) @ _rot("x", alpha)
    T = T @ desc.ee_transform
    return T[:3, 3], T[:3, 2]


def test_default_limits(desc):
    deg = np.pi / 180
    assert np.allclose(desc.q_max[:6], 180 * deg)
    assert np.allclose(desc.v_max[:6], np.array([103, 103, 103, 126, 126, 180]) * deg)
    assert np.allclose(desc.a_max[:6], 458 * deg)
    assert np.allclose(desc.q_max[6:], 3.0) and np.allclose(desc.v_max[6:], 1.0)
    assert np.allclose(desc.a_max[6:], 2.5)
    assert np.allclose(desc.q_min, -desc.q_max)
    assert desc.R_coll > 0 and desc.H_coll > 0


def test_fk_matches_matrix_chain(desc, rng):
    Q = random_q(rng, desc, 100)
    p, z, _ = fk_batch(desc, Q)
    for i, q in enumerate(Q):
        p_ref, z_ref = naive_fk(desc, q)
        assert np.max(np.abs(p[i] - p_ref)) < 1e-9
        assert np.max(np.abs(z[i] - z_ref)) < 1e-9


def test_zero_configuration_is_fixed_transforms(desc):
    pose = forward_kinematics(desc, np.zeros(8))
    T = desc.base_to_arm.copy()
    for off, d, a, alpha in desc.dh:
        T = T @ _rot("z", off) @ _trans(0, 0, d) @ _trans(a, 0, 0) @ _rot("x", alpha)
    T = T @ desc.ee_transform
    assert np.allclose(pose.p_world, T[:3, 3], atol=1e-12)


def test_base_shift(desc, rng):
    q = random_q(rng, desc, 1)[0]
    moved = q.copy()
    moved[6:] += [0.3, -0.7]
    a, b = forward_kinematics(desc, q), forward_kinematics(desc, moved)
    assert np.allclose(b.p_world - a.p_world, [0.3, -0.7, 0.0], atol=1e-12)
    assert np.array_equal(a.z_axis_world, b.z_axis_world)
    assert np.array_equal(a.p_arm, b.p_arm)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=8, max_size=8), st.floats(-2, 2), st.floats(-2, 2))
def test_fk_properties(desc, q, dx, dy):
    q = np.array(q)
    p, z, pa = fk_batch(desc, q)
    assert abs(np.linalg.norm(z[0]) - 1.0) < 1e-9
    q2 = q.copy()
    q2[6:] += (dx, dy)
    p2, z2, pa2 = fk_batch(desc, q2)
    assert np.allclose(p2[0] - p[0], [dx, dy, 0.0], atol=1e-12)
    assert np.array_equal(z[0], z2[0]) and np.array_equal(pa[0], pa2[0])


def test_cylinder_cases(desc):
    R, H = desc.R_coll, desc.H_coll
    assert cylinder_contains(desc, (0.0, 0.0, 0.0))
    assert not cylinder_contains(desc, (R + 0.01, 0.0, H / 2))
    assert cylinder_contains(desc, (R, 0.0, H))
    assert not cylinder_contains(desc, (0.0, 0.0, -1e-6))


def test_collision_monotone_in_size(desc, rng):
    small = desc.with_cylinder(0.6, 0.8)
    for q in random_q(rng, desc, 200):
        if collision_ok(small, q):
            assert collision_ok(desc, q)


def test_within_limits(desc):
    z = np.zeros(8)
    assert within_limits(desc, z, z, z)
    qd = z.copy()
    qd[0] = np.deg2rad(104)
    assert not within_limits(desc, z, qd, z)
    assert within_limits(desc, desc.q_max, z, z)
    assert within_limits(desc, desc.q_min, desc.v_min, desc.a_min)


def test_description_errors(tmp_path, desc):
    bad = tmp_path / "robot.toml"
    bad.write_text("format_version = 2\n")
    with pytest.raises(DescriptionError):
        load_description(bad)
    with pytest.raises(DescriptionError):
        RobotDescription(desc.dh, desc.base_to_arm, desc.ee_transform, desc.q_max, -desc.v_max,
                         desc.a_max, 1.0, 1.0)
    with pytest.raises(DescriptionError):
        desc.with_cylinder(0.0, 1.0)
