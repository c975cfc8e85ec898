"""Per-sequence mean bias labels from ground-truth trajectories.

The labeler cuts a sequence into fixed-length keyframe intervals, compares the
zero-bias preintegration of each interval with the terms implied by the
ground-truth states at its ends, and solves for the single bias shared by all
intervals: gyroscope first, then accelerometer with the gyroscope bias frozen.
Each solve re-linearizes a few times so large biases are not limited by the
first-order Jacobian model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .autodiff import OptimizerState, optimizer_step
from .geom import UnitQuaternion, slerp
from .imu_model import BiasBounds, GravityConfig, GroundTruthState, ImuBias, ImuModelError, ImuSample
from .preintegration import (
    Preintegration,
    PreintegrationError,
    gt_targets,
    integrate,
    rotation_error_vector,
)

logger = logging.getLogger(__name__)

BOUNDARY_TOLERANCE = 1e-9


class LabelingError(RuntimeError):
    """Raised when intervals cannot be built or a bias solve fails."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(slots=True)
class OptSchedule:
    """Iterative solver settings for one bias channel.

    ``method`` is ``"adam"`` (first-order, full batch) or ``"normal"`` (closed
    form normal equations). The Adam variable is the bias update divided by
    ``param_scale``; ``lr`` is expressed in those units.
    """

    method: str = "adam"
    lr: float = 0.001
    iterations: int = 15000
    decay_every: int = 5000
    decay_factor: float = 0.1
    passes: int = 3
    param_scale: float = 0.01
    divergence_window: int = 1000
    tolerance: float = 1e-6

    def __post_init__(self) -> None:
        if self.method not in ("adam", "normal"):
            raise ValueError(f"Unsupported solver method: {self.method}")
        if self.passes < 1 or self.iterations < 1 or self.decay_every < 1:
            raise ValueError("passes, iterations and decay_every must be positive")
        if not (self.lr > 0 and self.param_scale > 0 and 0 < self.decay_factor <= 1):
            raise ValueError("lr and param_scale must be positive and decay_factor in (0, 1]")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], **defaults: Any) -> "OptSchedule":
        merged = dict(defaults)
        merged.update(data)
        return cls(**merged)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


GYRO_SCHEDULE_DEFAULTS: Dict[str, Any] = {"lr": 0.001, "tolerance": 1e-6}
ACCEL_SCHEDULE_DEFAULTS: Dict[str, Any] = {"lr": 0.01, "tolerance": 1e-5}


@dataclass(slots=True)
class LabelingConfig:
    interval_s: float = 1.0
    gyro: OptSchedule = field(default_factory=lambda: OptSchedule(**GYRO_SCHEDULE_DEFAULTS))
    accel: OptSchedule = field(default_factory=lambda: OptSchedule(**ACCEL_SCHEDULE_DEFAULTS))
    gravity: GravityConfig = field(default_factory=GravityConfig)
    max_gt_gap: float = 0.5

    def __post_init__(self) -> None:
        if not self.interval_s > 0:
            raise ValueError("interval_s must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabelingConfig":
        payload = dict(data)
        gyro = OptSchedule.from_dict(payload.pop("gyro", {}), **GYRO_SCHEDULE_DEFAULTS)
        accel = OptSchedule.from_dict(payload.pop("accel", {}), **ACCEL_SCHEDULE_DEFAULTS)
        gravity_data = payload.pop("gravity", None)
        gravity = GravityConfig(**gravity_data) if gravity_data else GravityConfig()
        return cls(gyro=gyro, accel=accel, gravity=gravity, **payload)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "interval_s": self.interval_s,
            "gyro": self.gyro.to_dict(),
            "accel": self.accel.to_dict(),
            "gravity": self.gravity.to_dict(),
            "max_gt_gap": self.max_gt_gap,
        }


@dataclass(slots=True, eq=False)
class LabelInterval:
    """One keyframe interval: its IMU samples, preintegration and truth targets."""

    samples: List[ImuSample]
    preintegration: Preintegration
    alpha_gt: np.ndarray
    beta_gt: np.ndarray
    gamma_gt: UnitQuaternion
    dt: float


@dataclass(slots=True, eq=False)
class IntervalResidualSet:
    intervals: List[LabelInterval]
    gravity: GravityConfig

    def __len__(self) -> int:
        return len(self.intervals)

    def __iter__(self) -> Iterator[LabelInterval]:
        return iter(self.intervals)

    def preintegrate(self, bias: ImuBias) -> List[Preintegration]:
        """Preintegrations of every interval at linearization ``bias``."""

        if all(iv.preintegration.linearization_bias.allclose(bias, atol=0.0) for iv in self.intervals):
            return [iv.preintegration for iv in self.intervals]
        return [integrate(iv.samples, bias) for iv in self.intervals]


@dataclass(slots=True)
class BiasSolution:
    """Result of one channel solve."""

    value: np.ndarray
    iterations: int
    passes: int
    final_loss: float
    last_update_norm: float
    converged: bool


@dataclass(slots=True, eq=False)
class LabelResult:
    sequence_id: str
    ba_mean: np.ndarray
    bw_mean: np.ndarray
    rms_before: Dict[str, float]
    rms_after: Dict[str, float]
    iterations: int
    converged: bool
    interval_count: int
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def bias(self) -> ImuBias:
        return ImuBias(self.ba_mean, self.bw_mean)


# ----------------------------------------------------------------------
# Ground-truth interpolation
# ----------------------------------------------------------------------
def _gt_stamps(gt_states: Sequence[GroundTruthState]) -> np.ndarray:
    return np.array([s.timestamp for s in gt_states], dtype=np.float64)


def interpolate_state(
    gt_states: Sequence[GroundTruthState], t: float, stamps: Optional[np.ndarray] = None
) -> GroundTruthState:
    """State at ``t``: linear in position/velocity, slerp in orientation.

    A query equal to a ground-truth timestamp returns that sample unchanged.
    """

    stamps = _gt_stamps(gt_states) if stamps is None else stamps
    if not stamps[0] <= t <= stamps[-1]:
        raise LabelingError(
            f"t={t} outside ground-truth span [{stamps[0]}, {stamps[-1]}]",
            {"t": t, "gt_start": float(stamps[0]), "gt_end": float(stamps[-1])},
        )
    j = int(np.searchsorted(stamps, t, side="right")) - 1
    if stamps[j] == t or j == len(stamps) - 1:
        return gt_states[j]
    a, b = gt_states[j], gt_states[j + 1]
    frac = (t - stamps[j]) / (stamps[j + 1] - stamps[j])
    return GroundTruthState(
        timestamp=float(t),
        position=(1.0 - frac) * np.asarray(a.position) + frac * np.asarray(b.position),
        velocity=(1.0 - frac) * np.asarray(a.velocity) + frac * np.asarray(b.velocity),
        orientation=slerp(a.orientation, b.orientation, frac),
    )


def states_from_poses(
    stamps: Sequence[float],
    positions: np.ndarray,
    orientations: Sequence[UnitQuaternion],
) -> List[GroundTruthState]:
    """Ground-truth states for a pose-only trajectory.

    Velocities are central differences of the positions (one-sided at the
    ends), so labels can be computed from an estimated trajectory.
    """

    t = np.asarray(stamps, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(t) < 2 or len(t) != len(p) or len(p) != len(orientations):
        raise LabelingError(
            "Pose trajectory needs at least 2 poses with matching stamps and orientations",
            {"stamps": len(t), "positions": len(p), "orientations": len(orientations)},
        )
    if np.any(np.diff(t) <= 0):
        raise LabelingError("Pose timestamps must be strictly increasing")
    v = np.gradient(p, t, axis=0)
    return [
        GroundTruthState(timestamp=float(t[i]), position=p[i].copy(), velocity=v[i], orientation=orientations[i])
        for i in range(len(t))
    ]


# ----------------------------------------------------------------------
# Interval construction
# ----------------------------------------------------------------------
def build_intervals(
    imu: Sequence[ImuSample],
    gt_states: Sequence[GroundTruthState],
    interval_s: float = 1.0,
    gravity: Optional[GravityConfig] = None,
    max_gt_gap: float = 0.5,
) -> IntervalResidualSet:
    """Partition the IMU/ground-truth overlap into consecutive intervals.

    Interval boundaries are the first IMU samples at or after
    ``t_start + k * interval_s``; consecutive intervals share their boundary
    sample. Preintegration is computed at zero bias.
    """

    if not interval_s > 0:
        raise LabelingError(f"interval_s must be positive, got {interval_s}")
    if len(imu) < 2 or len(gt_states) < 2:
        raise LabelingError(
            "Need at least 2 IMU samples and 2 ground-truth states",
            {"imu": len(imu), "gt": len(gt_states)},
        )
    gravity = gravity or GravityConfig()
    imu_t = np.array([s.timestamp for s in imu], dtype=np.float64)
    gt_t = _gt_stamps(gt_states)
    t_start = max(imu_t[0], gt_t[0])
    t_end = min(imu_t[-1], gt_t[-1])
    count = int(math.floor((t_end - t_start) / interval_s + BOUNDARY_TOLERANCE)) if t_end > t_start else 0
    diagnostics = {
        "imu_span": [float(imu_t[0]), float(imu_t[-1])],
        "gt_span": [float(gt_t[0]), float(gt_t[-1])],
        "interval_s": interval_s,
    }
    if count < 1:
        raise LabelingError("Insufficient IMU/ground-truth overlap for one interval", diagnostics)

    inside = (gt_t >= t_start - max_gt_gap) & (gt_t <= t_end + max_gt_gap)
    gaps = np.diff(gt_t[inside])
    if gaps.size and gaps.max() > max_gt_gap:
        worst = int(np.argmax(gaps))
        raise LabelingError(
            f"Ground-truth gap of {gaps[worst]:.3f} s exceeds {max_gt_gap} s",
            {**diagnostics, "gap_start": float(gt_t[inside][worst])},
        )

    boundaries = t_start + interval_s * np.arange(count + 1)
    indices = np.searchsorted(imu_t, boundaries - BOUNDARY_TOLERANCE, side="left")
    zero = ImuBias.zero()
    intervals: List[LabelInterval] = []
    for k in range(count):
        lo, hi = int(indices[k]), int(indices[k + 1])
        if hi >= len(imu) or hi - lo < 1:
            raise LabelingError(
                f"Interval {k} has too few IMU samples",
                {**diagnostics, "interval": k, "first": lo, "last": hi},
            )
        samples = list(imu[lo : hi + 1])
        try:
            preint = integrate(samples, zero)
            state_a = interpolate_state(gt_states, samples[0].timestamp, gt_t)
            state_b = interpolate_state(gt_states, samples[-1].timestamp, gt_t)
            alpha_gt, beta_gt, gamma_gt = gt_targets(state_a, state_b, gravity, preint.dt_total)
        except PreintegrationError as exc:
            raise LabelingError(f"Interval {k}: {exc}", {**diagnostics, "interval": k}) from exc
        intervals.append(LabelInterval(samples, preint, alpha_gt, beta_gt, gamma_gt, preint.dt_total))

    logger.debug("Built %d label intervals over [%.3f, %.3f]", count, t_start, boundaries[-1])
    return IntervalResidualSet(intervals=intervals, gravity=gravity)


# ----------------------------------------------------------------------
# Quadratic solves
# ----------------------------------------------------------------------
def _normal_equations(H: np.ndarray, g: np.ndarray, channel: str) -> np.ndarray:
    try:
        return cho_solve(cho_factor(H), g)
    except LinAlgError as exc:
        raise LabelingError(
            f"{channel} bias is unobservable: normal matrix is not positive definite",
            {"channel": channel, "eigenvalues": np.linalg.eigvalsh(H).tolist()},
        ) from exc


def _minimize_quadratic(
    H: np.ndarray,
    g: np.ndarray,
    c: float,
    schedule: OptSchedule,
    channel: str,
    pass_index: int,
) -> Tuple[np.ndarray, int, float]:
    """Minimize ``c - 2 g.d + d.H.d`` over the update ``d``."""

    if schedule.method == "normal":
        delta = _normal_equations(H, g, channel)
        return delta, 1, float(c - g @ delta)

    s = schedule.param_scale
    u = np.zeros(3)
    state: Optional[OptimizerState] = None
    lr = schedule.lr
    previous = float(c)
    rising = 0
    for it in range(schedule.iterations):
        if it > 0 and it % schedule.decay_every == 0:
            lr *= schedule.decay_factor
        grad = 2.0 * s * (s * (H @ u) - g)
        state = optimizer_step("adam", [u], [grad], state, lr)
        loss = float(c - 2.0 * s * (g @ u) + s * s * (u @ H @ u))
        if not math.isfinite(loss):
            raise LabelingError(
                f"{channel} bias solve produced a non-finite loss",
                {"channel": channel, "pass": pass_index, "iteration": it, "lr": lr},
            )
        rising = rising + 1 if loss > previous else 0
        if rising >= schedule.divergence_window:
            raise LabelingError(
                f"{channel} bias solve diverged: loss increased for {rising} consecutive iterations",
                {"channel": channel, "pass": pass_index, "iteration": it, "loss": loss, "lr": lr},
            )
        previous = loss
    return s * u, schedule.iterations, previous


def _accumulate(blocks: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray, float]:
    H = np.zeros((3, 3))
    g = np.zeros(3)
    c = 0.0
    for J, r in blocks:
        H += J.T @ J
        g += J.T @ r
        c += float(r @ r)
    return H, g, c


def _require_intervals(residuals: IntervalResidualSet) -> None:
    if len(residuals) == 0:
        raise LabelingError("Interval set is empty")


def solve_gyro_bias(residuals: IntervalResidualSet, schedule: Optional[OptSchedule] = None) -> BiasSolution:
    """Shared gyroscope bias minimizing the rotation residuals of all intervals."""

    _require_intervals(residuals)
    schedule = schedule or OptSchedule(**GYRO_SCHEDULE_DEFAULTS)
    bw = np.zeros(3)
    iterations, loss, step = 0, float("nan"), float("inf")
    for p in range(schedule.passes):
        preints = residuals.preintegrate(ImuBias(np.zeros(3), bw))
        blocks = [
            (pi.J_gamma_bw, rotation_error_vector(pi.gamma, iv.gamma_gt))
            for pi, iv in zip(preints, residuals)
        ]
        H, g, c = _accumulate(blocks)
        delta, used, loss = _minimize_quadratic(H, g, c, schedule, "gyro", p)
        bw = bw + delta
        iterations += used
        step = float(np.linalg.norm(delta))
        logger.debug("gyro pass %d: |delta|=%.3e loss=%.6e", p, step, loss)
    return BiasSolution(bw, iterations, schedule.passes, loss, step, step <= schedule.tolerance)


def solve_accel_bias(
    residuals: IntervalResidualSet,
    bw_fixed: np.ndarray,
    schedule: Optional[OptSchedule] = None,
) -> BiasSolution:
    """Shared accelerometer bias with the gyroscope bias held at ``bw_fixed``.

    The first pass uses the stored zero-bias preintegration and corrects it
    for ``bw_fixed`` through the gyro Jacobians; later passes re-integrate at
    the current estimate.
    """

    _require_intervals(residuals)
    schedule = schedule or OptSchedule(**ACCEL_SCHEDULE_DEFAULTS)
    bw_fixed = np.asarray(bw_fixed, dtype=np.float64).reshape(3)
    ba = np.zeros(3)
    iterations, loss, step = 0, float("nan"), float("inf")
    for p in range(schedule.passes):
        if p == 0:
            preints = [iv.preintegration for iv in residuals]
        else:
            preints = residuals.preintegrate(ImuBias(ba, bw_fixed))
        blocks = []
        for pi, iv in zip(preints, residuals):
            d_bw = bw_fixed - pi.linearization_bias.bw
            d_ba = ba - pi.linearization_bias.ba
            r_alpha = iv.alpha_gt - pi.alpha - pi.J_alpha_bw @ d_bw - pi.J_alpha_ba @ d_ba
            r_beta = iv.beta_gt - pi.beta - pi.J_beta_bw @ d_bw - pi.J_beta_ba @ d_ba
            blocks.append((np.vstack([pi.J_alpha_ba, pi.J_beta_ba]), np.concatenate([r_alpha, r_beta])))
        H, g, c = _accumulate(blocks)
        delta, used, loss = _minimize_quadratic(H, g, c, schedule, "accel", p)
        ba = ba + delta
        iterations += used
        step = float(np.linalg.norm(delta))
        logger.debug("accel pass %d: |delta|=%.3e loss=%.6e", p, step, loss)
    return BiasSolution(ba, iterations, schedule.passes, loss, step, step <= schedule.tolerance)


# ----------------------------------------------------------------------
# Labels
# ----------------------------------------------------------------------
def channel_rms(residuals: IntervalResidualSet, bias: ImuBias) -> Dict[str, float]:
    """Root-mean-square alpha/beta/gamma residual norms after re-integrating at ``bias``."""

    preints = residuals.preintegrate(bias)
    sq = {"alpha": 0.0, "beta": 0.0, "gamma": 0.0}
    for pi, iv in zip(preints, residuals):
        sq["alpha"] += float(np.sum((iv.alpha_gt - pi.alpha) ** 2))
        sq["beta"] += float(np.sum((iv.beta_gt - pi.beta) ** 2))
        sq["gamma"] += float(np.sum(rotation_error_vector(pi.gamma, iv.gamma_gt) ** 2))
    n = len(residuals)
    return {k: math.sqrt(v / n) for k, v in sq.items()}


def make_labels(
    imu: Sequence[ImuSample],
    gt_states: Sequence[GroundTruthState],
    config: Optional[LabelingConfig] = None,
    sequence_id: str = "",
    bounds: Optional[BiasBounds] = None,
) -> LabelResult:
    """Mean bias label of one sequence: intervals, gyro solve, then accel solve.

    A label whose norm breaks ``bounds`` raises :class:`LabelingError`.
    """

    config = config or LabelingConfig()
    residuals = build_intervals(imu, gt_states, config.interval_s, config.gravity, config.max_gt_gap)
    gyro = solve_gyro_bias(residuals, config.gyro)
    accel = solve_accel_bias(residuals, gyro.value, config.accel)
    bias = ImuBias(accel.value, gyro.value)
    bounds = bounds or BiasBounds()
    try:
        bounds.check(bias)
    except ImuModelError as exc:
        raise LabelingError(
            f"Label for {sequence_id or 'sequence'} is implausible: {exc}",
            {"ba": bias.ba.tolist(), "bw": bias.bw.tolist(), **bounds.to_dict()},
        ) from exc
    before = channel_rms(residuals, ImuBias.zero())
    after = channel_rms(residuals, bias)
    logger.info(
        "Labeled %s: ba=%s bw=%s over %d intervals",
        sequence_id or "sequence",
        np.array2string(bias.ba, precision=5),
        np.array2string(bias.bw, precision=6),
        len(residuals),
    )
    return LabelResult(
        sequence_id=sequence_id,
        ba_mean=bias.ba,
        bw_mean=bias.bw,
        rms_before=before,
        rms_after=after,
        iterations=gyro.iterations + accel.iterations,
        converged=gyro.converged and accel.converged,
        interval_count=len(residuals),
        config=config.to_dict(),
    )


__all__ = [
    "BiasSolution",
    "IntervalResidualSet",
    "LabelInterval",
    "LabelResult",
    "LabelingConfig",
    "LabelingError",
    "OptSchedule",
    "build_intervals",
    "channel_rms",
    "interpolate_state",
    "make_labels",
    "solve_accel_bias",
    "solve_gyro_bias",
    "states_from_poses",
]
