"""Quaternion and SO(3) helpers shared by the numerical modules.

Quaternions follow the Hamilton convention with ``(w, x, y, z)`` ordering. A
quaternion ``q_w_b`` rotates body-frame vectors into the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

SMALL_ANGLE = 1e-8
RENORMALIZE_DRIFT = 1e-12
UNIT_TOLERANCE = 1e-6

ArrayLike = Union[Sequence[float], np.ndarray]


class GeometryError(ValueError):
    """Raised for non-finite or non-unit rotation inputs."""


@dataclass(frozen=True, slots=True)
class UnitQuaternion:
    """Unit quaternion ``w + xi + yj + zk``.

    The constructor renormalizes drift above ``1e-12`` and rejects inputs whose
    norm is further than ``1e-6`` from one; use :meth:`normalized` to build a
    rotation from an arbitrary non-zero 4-vector.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        values = (self.w, self.x, self.y, self.z)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"Quaternion components must be finite, got {values}")
        norm = math.sqrt(sum(v * v for v in values))
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise GeometryError(f"Quaternion norm {norm:.9f} is not unit")
        if abs(norm - 1.0) > RENORMALIZE_DRIFT:
            for name, value in zip(("w", "x", "y", "z"), values):
                object.__setattr__(self, name, float(value / norm))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def normalized(cls, w: float, x: float, y: float, z: float) -> "UnitQuaternion":
        norm = math.sqrt(w * w + x * x + y * y + z * z)
        if not math.isfinite(norm) or norm == 0.0:
            raise GeometryError("Cannot normalize a zero or non-finite quaternion")
        return cls(w / norm, x / norm, y / norm, z / norm)

    @classmethod
    def from_array(cls, values: ArrayLike) -> "UnitQuaternion":
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    # ------------------------------------------------------------------
    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return quat_multiply(self, other)

    def rotate(self, v: ArrayLike) -> np.ndarray:
        return quat_rotate(self, v)

    def to_matrix(self) -> np.ndarray:
        return rotation_matrix(self)


def _as_vector3(v: ArrayLike, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite, got {arr}")
    return arr


def skew(v: ArrayLike) -> np.ndarray:
    """Cross-product matrix ``[v]x`` such that ``skew(a) @ b == cross(a, b)``."""

    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_from_rotvec(v: ArrayLike) -> UnitQuaternion:
    """Exponential map from an axis-angle vector (radians) to a unit quaternion."""

    vec = _as_vector3(v, "rotation vector")
    theta = float(np.linalg.norm(vec))
    if theta < SMALL_ANGLE:
        # second-order series of cos(t/2) and sin(t/2)/t
        w = 1.0 - theta * theta / 8.0
        xyz = 0.5 * vec * (1.0 - theta * theta / 24.0)
        return UnitQuaternion.normalized(w, *xyz)
    half = 0.5 * theta
    xyz = math.sin(half) / theta * vec
    return UnitQuaternion.normalized(math.cos(half), *xyz)


def quat_log(q: UnitQuaternion) -> np.ndarray:
    """Logarithm map returning the rotation vector with angle in ``[0, pi]``."""

    w, xyz = q.w, q.vec
    if w < 0.0:
        w, xyz = -w, -xyz
    sin_half = float(np.linalg.norm(xyz))
    if sin_half < 1e-12:
        return 2.0 * xyz / w
    angle = 2.0 * math.atan2(sin_half, w)
    return xyz * (angle / sin_half)


def quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Hamilton product ``a * b``."""

    w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z
    x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y
    y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x
    z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    return UnitQuaternion(w / norm, x / norm, y / norm, z / norm)


def rotation_matrix(q: UnitQuaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_rotate(q: UnitQuaternion, v: ArrayLike) -> np.ndarray:
    """Rotate ``v`` by ``q``; equals ``R(q) @ v``."""

    return rotation_matrix(q) @ np.asarray(v, dtype=np.float64).reshape(3)


def quat_left_matrix(q: UnitQuaternion) -> np.ndarray:
    """4x4 matrix ``L(q)`` with ``q * p == L(q) @ p`` in ``(w, x, y, z)`` order."""

    w, v = q.w, q.vec
    out = np.empty((4, 4))
    out[0, 0] = w
    out[0, 1:] = -v
    out[1:, 0] = v
    out[1:, 1:] = w * np.eye(3) + skew(v)
    return out


def quat_right_matrix(q: UnitQuaternion) -> np.ndarray:
    """4x4 matrix ``R(q)`` with ``p * q == R(q) @ p``."""

    w, v = q.w, q.vec
    out = np.empty((4, 4))
    out[0, 0] = w
    out[0, 1:] = -v
    out[1:, 0] = v
    out[1:, 1:] = w * np.eye(3) - skew(v)
    return out


def right_jacobian(phi: ArrayLike) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""

    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * K @ K
    )


def right_jacobian_inverse(phi: ArrayLike) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coeff = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coeff * K @ K


def slerp(a: UnitQuaternion, b: UnitQuaternion, fraction: float) -> UnitQuaternion:
    """Spherical-linear interpolation along the shorter arc from ``a`` to ``b``."""

    delta = quat_multiply(a.conjugate(), b)
    return quat_multiply(a, quat_from_rotvec(fraction * quat_log(delta)))


def rotation_angle(q: UnitQuaternion) -> float:
    return float(np.linalg.norm(quat_log(q)))


__all__ = [
    "GeometryError",
    "UnitQuaternion",
    "quat_from_rotvec",
    "quat_log",
    "quat_multiply",
    "quat_rotate",
    "quat_left_matrix",
    "quat_right_matrix",
    "rotation_matrix",
    "rotation_angle",
    "right_jacobian",
    "right_jacobian_inverse",
    "skew",
    "slerp",
]
