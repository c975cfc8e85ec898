"""Unit tests for quaternion and SO(3) helpers."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation, Slerp

from imu_bias_prior.geom import (
    GeometryError,
    UnitQuaternion,
    quat_from_rotvec,
    quat_left_matrix,
    quat_log,
    quat_multiply,
    quat_right_matrix,
    quat_rotate,
    right_jacobian,
    right_jacobian_inverse,
    rotation_angle,
    rotation_matrix,
    slerp,
)
from imu_bias_prior.geom import skew


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _random_rotvec(rng, max_angle=math.pi - 1e-3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def _random_quat(rng):
    return UnitQuaternion.normalized(*rng.standard_normal(4))


def _expm_series(v, terms=30):
    K = skew(v)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ K / k
        out = out + term
    return out


def test_zero_rotvec_is_identity():
    q = quat_from_rotvec((0.0, 0.0, 0.0))
    assert q.as_array().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_quarter_turn_about_z():
    q = quat_from_rotvec((0.0, 0.0, math.pi / 2))
    np.testing.assert_allclose(q.as_array(), [math.sqrt(0.5), 0.0, 0.0, math.sqrt(0.5)], atol=1e-15)


def test_exp_matches_series_expansion(rng):
    for _ in range(50):
        v = _random_rotvec(rng)
        R = rotation_matrix(quat_from_rotvec(v))
        assert np.max(np.abs(R - _expm_series(v))) < 1e-10


def test_small_angle_branch_is_continuous():
    tiny = np.array([3e-9, -2e-9, 1e-9])
    q = quat_from_rotvec(tiny)
    np.testing.assert_allclose(q.vec, 0.5 * tiny, rtol=1e-12)
    np.testing.assert_allclose(quat_log(q), tiny, rtol=1e-9)


def test_non_finite_rotvec_rejected():
    with pytest.raises(GeometryError):
        quat_from_rotvec((float("nan"), 0.0, 0.0))


def test_log_of_identity_is_zero():
    assert quat_log(UnitQuaternion.identity()).tolist() == [0.0, 0.0, 0.0]


def test_log_quarter_turn():
    q = UnitQuaternion(math.sqrt(0.5), 0.0, 0.0, math.sqrt(0.5))
    np.testing.assert_allclose(quat_log(q), [0.0, 0.0, math.pi / 2], atol=1e-12)


def test_exp_log_round_trip(rng):
    worst = 0.0
    for _ in range(1000):
        v = _random_rotvec(rng)
        worst = max(worst, float(np.max(np.abs(quat_log(quat_from_rotvec(v)) - v))))
    assert worst < 1e-9


def test_log_picks_non_negative_scalar_part():
    q = quat_from_rotvec((0.3, -0.2, 0.1))
    flipped = UnitQuaternion(-q.w, -q.x, -q.y, -q.z)
    np.testing.assert_allclose(quat_log(flipped), quat_log(q), atol=1e-14)


def test_multiply_by_identity(rng):
    a = _random_quat(rng)
    np.testing.assert_allclose(quat_multiply(a, UnitQuaternion.identity()).as_array(), a.as_array(), atol=1e-15)


def test_rotate_quarter_turn():
    q = quat_from_rotvec((0.0, 0.0, math.pi / 2))
    np.testing.assert_allclose(quat_rotate(q, (1.0, 0.0, 0.0)), [0.0, 1.0, 0.0], atol=1e-15)


def test_multiply_is_associative(rng):
    for _ in range(100):
        a, b, c = (_random_quat(rng) for _ in range(3))
        left = quat_multiply(quat_multiply(a, b), c).as_array()
        right = quat_multiply(a, quat_multiply(b, c)).as_array()
        assert np.max(np.abs(left - right)) < 1e-12


def test_product_stays_unit(rng):
    q = UnitQuaternion.identity()
    for _ in range(500):
        q = quat_multiply(q, _random_quat(rng))
        assert abs(np.linalg.norm(q.as_array()) - 1.0) < 1e-12


def test_rotation_matrix_is_orthonormal(rng):
    for _ in range(100):
        R = rotation_matrix(_random_quat(rng))
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_hamilton_convention_matches_scipy(rng):
    for _ in range(20):
        q = _random_quat(rng)
        expected = Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()
        np.testing.assert_allclose(rotation_matrix(q), expected, atol=1e-12)
        a, b = q, _random_quat(rng)
        composed = Rotation.from_quat([a.x, a.y, a.z, a.w]) * Rotation.from_quat([b.x, b.y, b.z, b.w])
        np.testing.assert_allclose(rotation_matrix(quat_multiply(a, b)), composed.as_matrix(), atol=1e-12)


def test_left_and_right_product_matrices(rng):
    p, q = _random_quat(rng), _random_quat(rng)
    product = quat_multiply(q, p).as_array()
    np.testing.assert_allclose(quat_left_matrix(q) @ p.as_array(), product, atol=1e-14)
    np.testing.assert_allclose(quat_right_matrix(p) @ q.as_array(), product, atol=1e-14)


def test_non_unit_quaternion_rejected():
    with pytest.raises(GeometryError):
        UnitQuaternion(0.9, 0.0, 0.0, 0.0)


def test_small_drift_is_renormalized():
    q = UnitQuaternion(1.0 + 5e-8, 0.0, 0.0, 0.0)
    assert q.w == pytest.approx(1.0, abs=1e-15)


def test_right_jacobian_first_order(rng):
    for _ in range(10):
        phi = _random_rotvec(rng, 2.0)
        d = rng.standard_normal(3) * 1e-6
        moved = quat_multiply(quat_from_rotvec(phi).conjugate(), quat_from_rotvec(phi + d))
        np.testing.assert_allclose(quat_log(moved), right_jacobian(phi) @ d, atol=1e-11)
        np.testing.assert_allclose(right_jacobian_inverse(phi) @ right_jacobian(phi), np.eye(3), atol=1e-10)


def test_slerp_matches_scipy(rng):
    a, b = _random_quat(rng), _random_quat(rng)
    rotations = Rotation.from_quat([[a.x, a.y, a.z, a.w], [b.x, b.y, b.z, b.w]])
    oracle = Slerp([0.0, 1.0], rotations)
    for fraction in (0.0, 0.25, 0.5, 0.9):
        ours = rotation_matrix(slerp(a, b, fraction))
        np.testing.assert_allclose(ours, oracle([fraction]).as_matrix()[0], atol=1e-9)


def test_rotation_angle():
    assert rotation_angle(quat_from_rotvec((0.0, 0.4, 0.0))) == pytest.approx(0.4, abs=1e-14)
