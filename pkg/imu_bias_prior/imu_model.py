"""IMU measurement model and the analytic synthetic trajectory generator.

Measurements follow ``a_hat = R^T (a_world + g_world) + b_a + n_a`` and
``w_hat = w_body + b_w + n_w``. The generator draws motion from a closed-form
sinusoid family so positions, velocities, accelerations, attitude and body rates
are exact analytic derivatives of each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .geom import UnitQuaternion, quat_from_rotvec, quat_multiply, rotation_matrix
from .utils import as_vector

logger = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.81
DEFAULT_IMU_RATE = 200.0


class ImuModelError(ValueError):
    """Raised for invalid measurement, bias or trajectory parameters."""


def _vec(value: Any, name: str) -> np.ndarray:
    try:
        return as_vector(value, 3, name)
    except ValueError as exc:
        raise ImuModelError(str(exc)) from exc


@dataclass(slots=True, eq=False)
class ImuSample:
    """Timestamped body-frame gyro (rad/s) and accelerometer (m/s^2) reading."""

    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self) -> None:
        self.timestamp = float(self.timestamp)
        if not math.isfinite(self.timestamp):
            raise ImuModelError("IMU timestamp must be finite")
        self.gyro = _vec(self.gyro, "gyro")
        self.accel = _vec(self.accel, "accel")


@dataclass(slots=True, eq=False)
class ImuBias:
    """Accelerometer (``ba``, m/s^2) and gyroscope (``bw``, rad/s) bias pair."""

    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bw: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.ba = _vec(self.ba, "ba")
        self.bw = _vec(self.bw, "bw")

    @classmethod
    def zero(cls) -> "ImuBias":
        return cls()

    @classmethod
    def from_vector(cls, values: Any) -> "ImuBias":
        vec = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(ba=vec[:3].copy(), bw=vec[3:].copy())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImuBias":
        return cls(ba=data.get("ba", (0.0, 0.0, 0.0)), bw=data.get("bw", (0.0, 0.0, 0.0)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.ba, self.bw])

    def to_dict(self) -> Dict[str, List[float]]:
        return {"ba": self.ba.tolist(), "bw": self.bw.tolist()}

    def __add__(self, other: "ImuBias") -> "ImuBias":
        return ImuBias(self.ba + other.ba, self.bw + other.bw)

    def __sub__(self, other: "ImuBias") -> "ImuBias":
        return ImuBias(self.ba - other.ba, self.bw - other.bw)

    def allclose(self, other: "ImuBias", atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.as_vector(), other.as_vector(), rtol=0.0, atol=atol))

    def check_bounds(self, max_ba: float = 2.0, max_bw: float = 0.5) -> "ImuBias":
        if np.linalg.norm(self.ba) >= max_ba:
            raise ImuModelError(f"|ba| = {np.linalg.norm(self.ba):.4g} exceeds bound {max_ba}")
        if np.linalg.norm(self.bw) >= max_bw:
            raise ImuModelError(f"|bw| = {np.linalg.norm(self.bw):.4g} exceeds bound {max_bw}")
        return self


@dataclass(slots=True)
class BiasBounds:
    """Sanity limits on bias norms: ``|ba| < max_ba`` (m/s^2), ``|bw| < max_bw`` (rad/s)."""

    max_ba: float = 2.0
    max_bw: float = 0.5

    def __post_init__(self) -> None:
        for name in ("max_ba", "max_bw"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ImuModelError(f"{name} must be a positive finite number")
            setattr(self, name, value)

    def check(self, bias: ImuBias) -> ImuBias:
        return bias.check_bounds(self.max_ba, self.max_bw)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BiasBounds":
        return cls(**data)

    def to_dict(self) -> Dict[str, float]:
        return {"max_ba": self.max_ba, "max_bw": self.max_bw}


@dataclass(slots=True)
class NoiseSpec:
    """Per-sample white noise and per-sqrt(s) random-walk strengths."""

    accel_noise_std: float = 0.0
    gyro_noise_std: float = 0.0
    accel_walk_std: float = 0.0
    gyro_walk_std: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("accel_noise_std", "gyro_noise_std", "accel_walk_std", "gyro_walk_std"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ImuModelError(f"{name} must be a non-negative finite number")
            setattr(self, name, value)
        self.rng_seed = int(self.rng_seed)


@dataclass(slots=True, eq=False)
class GravityConfig:
    """World-frame gravity; points +z so a level sensor at rest reads +9.81."""

    g_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, STANDARD_GRAVITY]))
    allow_any_magnitude: bool = False

    def __post_init__(self) -> None:
        self.g_world = _vec(self.g_world, "g_world")
        magnitude = float(np.linalg.norm(self.g_world))
        if not self.allow_any_magnitude and not 9.7 <= magnitude <= 9.9:
            raise ImuModelError(
                f"Gravity magnitude {magnitude:.4f} outside [9.7, 9.9]; set allow_any_magnitude to override"
            )

    @classmethod
    def zero(cls) -> "GravityConfig":
        return cls(g_world=np.zeros(3), allow_any_magnitude=True)

    def to_dict(self) -> Dict[str, Any]:
        return {"g_world": self.g_world.tolist(), "allow_any_magnitude": self.allow_any_magnitude}


@dataclass(slots=True, eq=False)
class TrajectorySpec:
    """Closed-form sinusoidal motion.

    Position on axis ``i`` is ``A_i sin(2 pi f_i t + phi_i)``. Attitude is
    ``q0 * Rz(yaw) * Ry(pitch) * Rx(roll)`` with each Euler angle a sinusoid of
    its own amplitude, frequency and phase (ordering roll, pitch, yaw).
    """

    pos_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pos_frequency: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pos_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    att_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    att_frequency: np.ndarray = field(default_factory=lambda: np.zeros(3))
    att_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))
    duration: float = 10.0
    imu_rate: float = DEFAULT_IMU_RATE
    initial_attitude: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self) -> None:
        for name in (
            "pos_amplitude",
            "pos_frequency",
            "pos_phase",
            "att_amplitude",
            "att_frequency",
            "att_phase",
        ):
            setattr(self, name, _vec(getattr(self, name), name))
        self.duration = float(self.duration)
        self.imu_rate = float(self.imu_rate)
        if not self.duration > 0:
            raise ImuModelError("Trajectory duration must be positive")
        if not self.imu_rate > 0:
            raise ImuModelError("IMU rate must be positive")
        if not isinstance(self.initial_attitude, UnitQuaternion):
            self.initial_attitude = UnitQuaternion.from_array(self.initial_attitude)

    @property
    def sample_count(self) -> int:
        return int(math.floor(self.duration * self.imu_rate + 1e-9)) + 1

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectorySpec":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pos_amplitude": self.pos_amplitude.tolist(),
            "pos_frequency": self.pos_frequency.tolist(),
            "pos_phase": self.pos_phase.tolist(),
            "att_amplitude": self.att_amplitude.tolist(),
            "att_frequency": self.att_frequency.tolist(),
            "att_phase": self.att_phase.tolist(),
            "duration": self.duration,
            "imu_rate": self.imu_rate,
            "initial_attitude": self.initial_attitude.as_array().tolist(),
        }


@dataclass(slots=True, eq=False)
class GroundTruthState:
    """Pose, velocity and (optionally) bias at one instant."""

    timestamp: float
    position: np.ndarray
    velocity: np.ndarray
    orientation: UnitQuaternion
    ba: Optional[np.ndarray] = None
    bw: Optional[np.ndarray] = None


@dataclass(slots=True, eq=False)
class MotionSample:
    """Analytic kinematics of the synthetic trajectory at one instant."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    orientation: UnitQuaternion
    angular_velocity: np.ndarray


@dataclass(slots=True, eq=False)
class SyntheticSequence:
    """Output of :func:`synthesize_sequence`: measurements plus their truth."""

    samples: List[ImuSample]
    ground_truth: List[GroundTruthState]
    bias_path: np.ndarray

    def mean_bias(self) -> ImuBias:
        return ImuBias.from_vector(self.bias_path.mean(axis=0))


def _euler_quaternion(roll: float, pitch: float, yaw: float) -> UnitQuaternion:
    qz = quat_from_rotvec((0.0, 0.0, yaw))
    qy = quat_from_rotvec((0.0, pitch, 0.0))
    qx = quat_from_rotvec((roll, 0.0, 0.0))
    return quat_multiply(quat_multiply(qz, qy), qx)


def sample_ground_truth(spec: TrajectorySpec, t: float) -> MotionSample:
    """Evaluate the analytic trajectory and its derivatives at time ``t``."""

    if not -1e-9 <= t <= spec.duration + 1e-9:
        raise ImuModelError(f"t={t} outside trajectory span [0, {spec.duration}]")

    omega = 2.0 * math.pi * spec.pos_frequency
    arg = omega * t + spec.pos_phase
    position = spec.pos_amplitude * np.sin(arg)
    velocity = spec.pos_amplitude * omega * np.cos(arg)
    acceleration = -spec.pos_amplitude * omega**2 * np.sin(arg)

    att_omega = 2.0 * math.pi * spec.att_frequency
    att_arg = att_omega * t + spec.att_phase
    roll, pitch, yaw = spec.att_amplitude * np.sin(att_arg)
    droll, dpitch, dyaw = spec.att_amplitude * att_omega * np.cos(att_arg)

    orientation = quat_multiply(spec.initial_attitude, _euler_quaternion(roll, pitch, yaw))
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    angular_velocity = np.array(
        [
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            dyaw * cp * cr - dpitch * sr,
        ]
    )
    return MotionSample(position, velocity, acceleration, orientation, angular_velocity)


def synthesize_sequence(
    spec: TrajectorySpec,
    bias: ImuBias,
    noise: NoiseSpec,
    gravity: Optional[GravityConfig] = None,
) -> SyntheticSequence:
    """Generate IMU samples for ``spec`` together with ground truth and bias path."""

    gravity = gravity or GravityConfig()
    count = spec.sample_count
    dt = 1.0 / spec.imu_rate
    rng = np.random.default_rng(noise.rng_seed)
    accel_noise = rng.standard_normal((count, 3)) * noise.accel_noise_std
    gyro_noise = rng.standard_normal((count, 3)) * noise.gyro_noise_std
    accel_walk = rng.standard_normal((count, 3)) * noise.accel_walk_std * math.sqrt(dt)
    gyro_walk = rng.standard_normal((count, 3)) * noise.gyro_walk_std * math.sqrt(dt)

    bias_path = np.empty((count, 6))
    ba, bw = bias.ba.copy(), bias.bw.copy()
    samples: List[ImuSample] = []
    ground_truth: List[GroundTruthState] = []
    for k in range(count):
        if k > 0:
            ba = ba + accel_walk[k]
            bw = bw + gyro_walk[k]
        stamp = k / spec.imu_rate
        motion = sample_ground_truth(spec, min(stamp, spec.duration))
        R = rotation_matrix(motion.orientation)
        accel = R.T @ (motion.acceleration + gravity.g_world) + ba + accel_noise[k]
        gyro = motion.angular_velocity + bw + gyro_noise[k]
        samples.append(ImuSample(stamp, gyro, accel))
        ground_truth.append(
            GroundTruthState(
                timestamp=stamp,
                position=motion.position,
                velocity=motion.velocity,
                orientation=motion.orientation,
                ba=ba.copy(),
                bw=bw.copy(),
            )
        )
        bias_path[k, :3] = ba
        bias_path[k, 3:] = bw

    logger.debug("Synthesized %d IMU samples at %.1f Hz", count, spec.imu_rate)
    return SyntheticSequence(samples=samples, ground_truth=ground_truth, bias_path=bias_path)


def synthesize_measurements(
    spec: TrajectorySpec,
    bias: ImuBias,
    noise: NoiseSpec,
    gravity: Optional[GravityConfig] = None,
) -> List[ImuSample]:
    """IMU samples of :func:`synthesize_sequence` without the truth channels."""

    return synthesize_sequence(spec, bias, noise, gravity).samples


def noise_from_density(density: float, rate: float) -> float:
    """Convert a continuous-time density (unit/sqrt(Hz)) to a per-sample std.

    EuRoC-style sensor sheets quote white noise as a density; sampling at
    ``rate`` Hz gives a discrete standard deviation of ``density * sqrt(rate)``.
    """

    if density < 0 or rate <= 0:
        raise ImuModelError("density must be non-negative and rate positive")
    return float(density) * math.sqrt(float(rate))


__all__ = [
    "BiasBounds",
    "GravityConfig",
    "GroundTruthState",
    "ImuBias",
    "ImuModelError",
    "ImuSample",
    "MotionSample",
    "NoiseSpec",
    "SyntheticSequence",
    "TrajectorySpec",
    "noise_from_density",
    "sample_ground_truth",
    "synthesize_measurements",
    "synthesize_sequence",
]
