"""Discrete IMU preintegration with first-order bias Jacobians.

The relative motion terms between two keyframes are accumulated with the
midpoint rule in the frame of the first keyframe:

* ``alpha`` - double-integrated, bias-corrected acceleration (m)
* ``beta``  - integrated acceleration (m/s)
* ``gamma`` - accumulated rotation (unit quaternion)

Bias sensitivities are propagated with the exact linearization of the same
midpoint recursion, so :func:`correct_first_order` agrees with a full
re-integration up to second order in the bias change.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Tuple

import numpy as np

from .geom import (
    GeometryError,
    UnitQuaternion,
    quat_from_rotvec,
    quat_multiply,
    right_jacobian,
    rotation_matrix,
    skew,
)
from .imu_model import GravityConfig, ImuBias, ImuSample

logger = logging.getLogger(__name__)


class PreintegrationError(ValueError):
    """Raised for unusable sample spans or inconsistent states."""


def _zeros33() -> np.ndarray:
    return np.zeros((3, 3))


@dataclass(slots=True, eq=False)
class Preintegration:
    """Preintegrated terms of one keyframe interval and their bias Jacobians."""

    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    J_alpha_ba: np.ndarray = field(default_factory=_zeros33)
    J_alpha_bw: np.ndarray = field(default_factory=_zeros33)
    J_beta_ba: np.ndarray = field(default_factory=_zeros33)
    J_beta_bw: np.ndarray = field(default_factory=_zeros33)
    J_gamma_bw: np.ndarray = field(default_factory=_zeros33)
    dt_total: float = 0.0
    linearization_bias: ImuBias = field(default_factory=ImuBias.zero)
    start_time: float = 0.0

    @property
    def end_time(self) -> float:
        return self.start_time + self.dt_total


def _stack_samples(samples: Sequence[ImuSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(samples) < 2:
        raise PreintegrationError(f"Preintegration needs at least 2 samples, got {len(samples)}")
    stamps = np.array([s.timestamp for s in samples])
    steps = np.diff(stamps)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise PreintegrationError(
            f"Timestamps must be strictly increasing (sample {bad}: {stamps[bad - 1]} -> {stamps[bad]})"
        )
    gyro = np.stack([s.gyro for s in samples])
    accel = np.stack([s.accel for s in samples])
    return stamps, gyro, accel


def integrate(samples: Sequence[ImuSample], bias: Optional[ImuBias] = None) -> Preintegration:
    """Midpoint-integrate ``samples`` (first to last) at linearization ``bias``."""

    bias = bias or ImuBias.zero()
    stamps, gyro, accel = _stack_samples(samples)
    ba, bw = bias.ba, bias.bw

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = UnitQuaternion.identity()
    R0 = np.eye(3)
    J_alpha_ba, J_alpha_bw = _zeros33(), _zeros33()
    J_beta_ba, J_beta_bw = _zeros33(), _zeros33()
    J_gamma = _zeros33()

    for i in range(len(stamps) - 1):
        dt = stamps[i + 1] - stamps[i]
        a0 = accel[i] - ba
        a1 = accel[i + 1] - ba
        phi = (0.5 * (gyro[i] + gyro[i + 1]) - bw) * dt

        dq = quat_from_rotvec(phi)
        gamma_next = quat_multiply(gamma, dq)
        R1 = rotation_matrix(gamma_next)
        J_gamma_next = rotation_matrix(dq).T @ J_gamma - right_jacobian(phi) * dt

        acc_mid = 0.5 * (R0 @ a0 + R1 @ a1)
        dacc_dba = -0.5 * (R0 + R1)
        dacc_dbw = -0.5 * (R0 @ skew(a0) @ J_gamma + R1 @ skew(a1) @ J_gamma_next)

        half_dt2 = 0.5 * dt * dt
        alpha = alpha + beta * dt + acc_mid * half_dt2
        J_alpha_ba = J_alpha_ba + J_beta_ba * dt + dacc_dba * half_dt2
        J_alpha_bw = J_alpha_bw + J_beta_bw * dt + dacc_dbw * half_dt2
        beta = beta + acc_mid * dt
        J_beta_ba = J_beta_ba + dacc_dba * dt
        J_beta_bw = J_beta_bw + dacc_dbw * dt

        gamma, R0, J_gamma = gamma_next, R1, J_gamma_next

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        J_alpha_ba=J_alpha_ba,
        J_alpha_bw=J_alpha_bw,
        J_beta_ba=J_beta_ba,
        J_beta_bw=J_beta_bw,
        J_gamma_bw=J_gamma,
        dt_total=float(stamps[-1] - stamps[0]),
        linearization_bias=ImuBias(ba.copy(), bw.copy()),
        start_time=float(stamps[0]),
    )


def correct_first_order(
    p: Preintegration, new_bias: ImuBias
) -> Tuple[np.ndarray, np.ndarray, UnitQuaternion]:
    """First-order bias update of ``alpha``, ``beta`` and ``gamma``."""

    delta = new_bias - p.linearization_bias
    if not np.any(delta.as_vector()):
        return p.alpha.copy(), p.beta.copy(), p.gamma
    alpha = p.alpha + p.J_alpha_ba @ delta.ba + p.J_alpha_bw @ delta.bw
    beta = p.beta + p.J_beta_ba @ delta.ba + p.J_beta_bw @ delta.bw
    gamma = quat_multiply(p.gamma, quat_from_rotvec(p.J_gamma_bw @ delta.bw))
    return alpha, beta, gamma


def compose(first: Preintegration, second: Preintegration) -> Preintegration:
    """Concatenate two consecutive intervals linearized at the same bias."""

    if not first.linearization_bias.allclose(second.linearization_bias):
        raise PreintegrationError("Cannot compose preintegrations with different linearization biases")
    R1 = rotation_matrix(first.gamma)
    R2 = rotation_matrix(second.gamma)
    dt2 = second.dt_total
    rot_alpha = -R1 @ skew(second.alpha) @ first.J_gamma_bw
    rot_beta = -R1 @ skew(second.beta) @ first.J_gamma_bw
    return Preintegration(
        alpha=first.alpha + first.beta * dt2 + R1 @ second.alpha,
        beta=first.beta + R1 @ second.beta,
        gamma=quat_multiply(first.gamma, second.gamma),
        J_alpha_ba=first.J_alpha_ba + first.J_beta_ba * dt2 + R1 @ second.J_alpha_ba,
        J_alpha_bw=first.J_alpha_bw + first.J_beta_bw * dt2 + rot_alpha + R1 @ second.J_alpha_bw,
        J_beta_ba=first.J_beta_ba + R1 @ second.J_beta_ba,
        J_beta_bw=first.J_beta_bw + rot_beta + R1 @ second.J_beta_bw,
        J_gamma_bw=R2.T @ first.J_gamma_bw + second.J_gamma_bw,
        dt_total=first.dt_total + dt2,
        linearization_bias=first.linearization_bias,
        start_time=first.start_time,
    )


def _orientation(state: Any) -> UnitQuaternion:
    q = state.orientation
    if isinstance(q, UnitQuaternion):
        return q
    try:
        return UnitQuaternion.from_array(q)
    except GeometryError as exc:
        raise PreintegrationError(f"State orientation is not a unit quaternion: {exc}") from exc


def gt_targets(
    state_k: Any,
    state_k1: Any,
    gravity: Optional[GravityConfig] = None,
    dt: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, UnitQuaternion]:
    """Preintegrated terms implied by two ground-truth states.

    ``state_k`` / ``state_k1`` expose ``position``, ``velocity``, ``orientation``
    and ``timestamp``; ``dt`` defaults to the timestamp difference.
    """

    gravity = gravity or GravityConfig()
    if dt is None:
        dt = float(state_k1.timestamp - state_k.timestamp)
    if not dt > 0:
        raise PreintegrationError(f"dt must be positive, got {dt}")
    q_k = _orientation(state_k)
    q_k1 = _orientation(state_k1)
    Rt = rotation_matrix(q_k).T
    g = gravity.g_world
    p_k, v_k = np.asarray(state_k.position), np.asarray(state_k.velocity)
    p_k1, v_k1 = np.asarray(state_k1.position), np.asarray(state_k1.velocity)
    alpha = Rt @ (p_k1 - p_k - v_k * dt + 0.5 * g * dt * dt)
    beta = Rt @ (v_k1 - v_k + g * dt)
    gamma = quat_multiply(q_k.conjugate(), q_k1)
    return alpha, beta, gamma


def rotation_error_vector(estimate: UnitQuaternion, target: UnitQuaternion) -> np.ndarray:
    """``2 * vec(estimate^-1 * target)`` with the scalar part kept non-negative."""

    error = quat_multiply(estimate.conjugate(), target)
    sign = -1.0 if error.w < 0 else 1.0
    return 2.0 * sign * error.vec


__all__ = [
    "Preintegration",
    "PreintegrationError",
    "compose",
    "correct_first_order",
    "gt_targets",
    "integrate",
    "rotation_error_vector",
]
