"""Fixed-lag sliding-window smoother with an optional bias prior factor.

Each keyframe carries position, velocity, orientation and IMU bias. The window
is tied together by preintegration factors (with bias random-walk rows), pose
observations standing in for a visual frontend, and bias prior factors whose
targets come from a :mod:`imu_bias_prior.priors` source. Every new keyframe
triggers a Levenberg-Marquardt solve; the oldest keyframe's pose is held fixed
to remove the gauge freedom and is simply dropped once it leaves the window.

Tangent layout of one keyframe (15 dof)::

    [dp(3), dv(3), dtheta(3), dba(3), dbw(3)]

Orientation updates are right-multiplied: ``q <- q * Exp(dtheta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky

from .geom import (
    GeometryError,
    UnitQuaternion,
    quat_from_rotvec,
    quat_left_matrix,
    quat_log,
    quat_multiply,
    quat_right_matrix,
    right_jacobian,
    right_jacobian_inverse,
    rotation_matrix,
    skew,
)
from .imu_model import GravityConfig, GroundTruthState, ImuBias, ImuSample
from .ipnet import PriorEstimate
from .preintegration import Preintegration, correct_first_order, integrate

logger = logging.getLogger(__name__)

STATE_DIM = 15
P, V, TH, BA, BW = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


class FusionError(ValueError):
    """Raised for malformed graphs, factors or input streams."""


class SolverError(RuntimeError):
    """Raised when the damped normal equations cannot be solved."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
@dataclass(slots=True)
class LmOptions:
    max_iterations: int = 50
    relative_decrease: float = 1e-9
    min_step: float = 1e-10
    initial_lambda: float = 1e-6
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_lambda: float = 1e10

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LmOptions":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(slots=True)
class FusionConfig:
    """Estimator settings; sigmas are per sqrt(second) for the IMU channels."""

    keyframe_period: float = 0.5
    lag: int = 10
    prior_enabled: bool = True
    retroactive_prior: bool = False
    use_warmup_prior: bool = False
    sigma_ba: float = 0.1
    sigma_bw: float = 0.01
    imu_accel_sigma: float = 0.02
    imu_gyro_sigma: float = 0.002
    accel_walk_sigma: float = 1e-3
    gyro_walk_sigma: float = 1e-4
    obs_position_sigma: float = 0.01
    obs_rotation_sigma: float = 0.01
    obs_tolerance: float = 2.5e-3
    gravity: GravityConfig = field(default_factory=GravityConfig)
    lm: LmOptions = field(default_factory=LmOptions)

    def __post_init__(self) -> None:
        if not self.keyframe_period > 0:
            raise FusionError("keyframe_period must be positive")
        if self.lag < 2:
            raise FusionError("lag must keep at least 2 keyframes")
        for name in (
            "sigma_ba",
            "sigma_bw",
            "imu_accel_sigma",
            "imu_gyro_sigma",
            "accel_walk_sigma",
            "gyro_walk_sigma",
            "obs_position_sigma",
            "obs_rotation_sigma",
        ):
            if not getattr(self, name) > 0:
                raise FusionError(f"{name} must be positive")

    def prior_weight(self) -> np.ndarray:
        """Diagonal prior weight ``W`` with ``1/sigma`` entries."""

        return np.diag([1.0 / self.sigma_ba] * 3 + [1.0 / self.sigma_bw] * 3)

    def imu_sqrt_info(self, dt: float) -> np.ndarray:
        root = math.sqrt(dt)
        return np.array(
            [1.0 / (self.imu_accel_sigma * root)] * 6
            + [1.0 / (self.imu_gyro_sigma * root)] * 3
            + [1.0 / (self.accel_walk_sigma * root)] * 3
            + [1.0 / (self.gyro_walk_sigma * root)] * 3
        )

    def observation_info(self) -> np.ndarray:
        return np.diag([self.obs_position_sigma**-2] * 3 + [self.obs_rotation_sigma**-2] * 3)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FusionConfig":
        payload = dict(data)
        lm = LmOptions.from_dict(payload.pop("lm", {}))
        gravity_data = payload.pop("gravity", None)
        gravity = GravityConfig(**gravity_data) if gravity_data else GravityConfig()
        return cls(lm=lm, gravity=gravity, **payload)

    def to_dict(self) -> Dict[str, Any]:
        data = {name: getattr(self, name) for name in self.__dataclass_fields__ if name not in ("gravity", "lm")}
        data["gravity"] = self.gravity.to_dict()
        data["lm"] = self.lm.to_dict()
        return data


# ----------------------------------------------------------------------
# States and factors
# ----------------------------------------------------------------------
@dataclass(slots=True, eq=False)
class KeyframeState:
    timestamp: float
    p: np.ndarray
    v: np.ndarray
    q: UnitQuaternion
    bias: ImuBias = field(default_factory=ImuBias.zero)

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if not isinstance(self.q, UnitQuaternion):
            self.q = UnitQuaternion.from_array(self.q)
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v))):
            raise FusionError(f"Keyframe at t={self.timestamp} has non-finite position or velocity")

    def copy(self) -> "KeyframeState":
        return KeyframeState(self.timestamp, self.p.copy(), self.v.copy(), self.q, ImuBias(self.bias.ba, self.bias.bw))

    def retract(self, delta: np.ndarray) -> "KeyframeState":
        """State moved by a 15-dof tangent ``delta``."""

        return KeyframeState(
            self.timestamp,
            self.p + delta[P],
            self.v + delta[V],
            quat_multiply(self.q, quat_from_rotvec(delta[TH])),
            ImuBias(self.bias.ba + delta[BA], self.bias.bw + delta[BW]),
        )

    @classmethod
    def from_ground_truth(cls, state: GroundTruthState, bias: Optional[ImuBias] = None) -> "KeyframeState":
        return cls(state.timestamp, state.position, state.velocity, state.orientation, bias or ImuBias.zero())


@dataclass(slots=True, eq=False)
class PoseObservation:
    """Position and orientation fix; ``dropped`` emulates a tracking failure."""

    timestamp: float
    position: np.ndarray
    orientation: UnitQuaternion
    dropped: bool = False


@dataclass(slots=True, eq=False)
class BiasPriorFactor:
    target: ImuBias
    W: np.ndarray
    keyframe: int

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != (6, 6):
            raise FusionError(f"Prior weight must be 6x6, got {self.W.shape}")
        if not np.allclose(self.W, self.W.T, rtol=0.0, atol=1e-12):
            raise FusionError("Prior weight must be symmetric")
        if np.linalg.eigvalsh(self.W).min() < -1e-12:
            raise FusionError("Prior weight must be positive semi-definite")


@dataclass(slots=True, eq=False)
class ImuFactor:
    i: int
    j: int
    preint: Preintegration
    sqrt_info: np.ndarray


@dataclass(slots=True, eq=False)
class PoseFactor:
    keyframe: int
    observation: PoseObservation
    info: np.ndarray


@dataclass(eq=False)
class WindowGraph:
    keyframes: List[KeyframeState]
    imu_factors: List[ImuFactor] = field(default_factory=list)
    pose_factors: List[PoseFactor] = field(default_factory=list)
    prior_factors: List[BiasPriorFactor] = field(default_factory=list)
    gravity: GravityConfig = field(default_factory=GravityConfig)
    pinned: int = 0

    def validate(self) -> None:
        count = len(self.keyframes)
        if count == 0:
            raise FusionError("Window has no keyframes")
        pairs = sorted((f.i, f.j) for f in self.imu_factors)
        if pairs != [(k, k + 1) for k in range(count - 1)]:
            raise FusionError(f"Expected one IMU factor per adjacent keyframe pair, got {pairs}")
        for f in self.pose_factors:
            if not 0 <= f.keyframe < count:
                raise FusionError(f"Pose factor references keyframe {f.keyframe} outside window")
        for f in self.prior_factors:
            if not 0 <= f.keyframe < count:
                raise FusionError(f"Prior factor references keyframe {f.keyframe} outside window")
        if not 0 <= self.pinned < count:
            raise FusionError(f"Pinned keyframe {self.pinned} outside window")


# ----------------------------------------------------------------------
# Residuals
# ----------------------------------------------------------------------
def prior_residual_and_jacobian(state: KeyframeState, factor: BiasPriorFactor) -> Tuple[np.ndarray, np.ndarray]:
    """``r = W [ba - ba_hat; bw - bw_hat]`` and its Jacobian ``W`` w.r.t. ``[ba; bw]``."""

    diff = (state.bias - factor.target).as_vector()
    return factor.W @ diff, factor.W.copy()


def propagate(state: KeyframeState, preint: Preintegration, gravity: GravityConfig) -> KeyframeState:
    """State at the end of ``preint`` predicted from ``state`` and its bias."""

    alpha, beta, gamma = correct_first_order(preint, state.bias)
    dt = preint.dt_total
    R = rotation_matrix(state.q)
    g = gravity.g_world
    return KeyframeState(
        timestamp=state.timestamp + dt,
        p=state.p + state.v * dt - 0.5 * g * dt * dt + R @ alpha,
        v=state.v - g * dt + R @ beta,
        q=quat_multiply(state.q, gamma),
        bias=ImuBias(state.bias.ba, state.bias.bw),
    )


def imu_factor_residual(
    state_k: KeyframeState,
    state_k1: KeyframeState,
    preint: Preintegration,
    gravity: GravityConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unweighted 15-vector residual and its Jacobians w.r.t. both keyframes."""

    dt = preint.dt_total
    if not dt > 0:
        raise FusionError(f"Preintegration interval must be positive, got {dt}")
    span = state_k1.timestamp - state_k.timestamp
    if abs(span - dt) > 1e-6:
        raise FusionError(f"Preintegration covers {dt:.6f} s but keyframes are {span:.6f} s apart")

    delta = state_k.bias - preint.linearization_bias
    alpha_c, beta_c, gamma_c = correct_first_order(preint, state_k.bias)
    Ri = rotation_matrix(state_k.q)
    g = gravity.g_world
    pos_term = state_k1.p - state_k.p - state_k.v * dt + 0.5 * g * dt * dt
    vel_term = state_k1.v - state_k.v + g * dt
    relative = quat_multiply(state_k.q.conjugate(), state_k1.q)
    error = quat_multiply(gamma_c.conjugate(), relative)
    sign = -1.0 if error.w < 0 else 1.0

    r = np.empty(STATE_DIM)
    r[P] = Ri.T @ pos_term - alpha_c
    r[V] = Ri.T @ vel_term - beta_c
    r[TH] = 2.0 * sign * error.vec
    r[BA] = state_k1.bias.ba - state_k.bias.ba
    r[BW] = state_k1.bias.bw - state_k.bias.bw

    Ji = np.zeros((STATE_DIM, STATE_DIM))
    Jj = np.zeros((STATE_DIM, STATE_DIM))
    eye = np.eye(3)

    Ji[P, P] = -Ri.T
    Ji[P, V] = -Ri.T * dt
    Ji[P, TH] = skew(Ri.T @ pos_term)
    Ji[P, BA] = -preint.J_alpha_ba
    Ji[P, BW] = -preint.J_alpha_bw
    Jj[P, P] = Ri.T

    Ji[V, V] = -Ri.T
    Ji[V, TH] = skew(Ri.T @ vel_term)
    Ji[V, BA] = -preint.J_beta_ba
    Ji[V, BW] = -preint.J_beta_bw
    Jj[V, V] = Ri.T

    phi = preint.J_gamma_bw @ delta.bw
    Ji[TH, TH] = -sign * (quat_left_matrix(gamma_c.conjugate()) @ quat_right_matrix(relative))[1:, 1:]
    Ji[TH, BW] = -sign * quat_right_matrix(error)[1:, 1:] @ right_jacobian(phi) @ preint.J_gamma_bw
    Jj[TH, TH] = sign * (error.w * eye + skew(error.vec))

    Ji[BA, BA] = -eye
    Jj[BA, BA] = eye
    Ji[BW, BW] = -eye
    Jj[BW, BW] = eye
    return r, Ji, Jj


def _sqrt_info(info: np.ndarray) -> np.ndarray:
    try:
        return cholesky(np.asarray(info, dtype=np.float64), lower=False)
    except LinAlgError as exc:
        raise FusionError("Observation information matrix must be positive definite") from exc


def pose_obs_residual(
    state: KeyframeState, observed: PoseObservation, info: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted ``[p - p_obs; log(q_obs^-1 q)]`` and its 6x15 Jacobian."""

    S = _sqrt_info(info)
    phi = quat_log(quat_multiply(observed.orientation.conjugate(), state.q))
    error = np.concatenate([state.p - np.asarray(observed.position), phi])
    J = np.zeros((6, STATE_DIM))
    J[:3, P] = np.eye(3)
    J[3:, TH] = right_jacobian_inverse(phi)
    return S @ error, S @ J


# ----------------------------------------------------------------------
# Levenberg-Marquardt
# ----------------------------------------------------------------------
@dataclass(eq=False)
class WindowSolution:
    keyframes: List[KeyframeState]
    cost: float
    iterations: int
    cost_history: List[float]
    reason: str


def _free_columns(count: int, pinned: int) -> np.ndarray:
    cols: List[int] = []
    for k in range(count):
        base = k * STATE_DIM
        if k == pinned:
            cols.extend(range(base + 3, base + 6))
            cols.extend(range(base + 9, base + 15))
        else:
            cols.extend(range(base, base + STATE_DIM))
    return np.array(cols, dtype=int)


def linearize(graph: WindowGraph, keyframes: Sequence[KeyframeState]) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked weighted residual and dense Jacobian over every keyframe tangent."""

    width = STATE_DIM * len(keyframes)
    rows: List[np.ndarray] = []
    blocks: List[np.ndarray] = []
    for f in graph.imu_factors:
        r, Ji, Jj = imu_factor_residual(keyframes[f.i], keyframes[f.j], f.preint, graph.gravity)
        J = np.zeros((STATE_DIM, width))
        J[:, f.i * STATE_DIM : (f.i + 1) * STATE_DIM] = Ji
        J[:, f.j * STATE_DIM : (f.j + 1) * STATE_DIM] = Jj
        rows.append(f.sqrt_info * r)
        blocks.append(f.sqrt_info[:, None] * J)
    for f in graph.pose_factors:
        r, Jk = pose_obs_residual(keyframes[f.keyframe], f.observation, f.info)
        J = np.zeros((6, width))
        J[:, f.keyframe * STATE_DIM : (f.keyframe + 1) * STATE_DIM] = Jk
        rows.append(r)
        blocks.append(J)
    for f in graph.prior_factors:
        r, Jb = prior_residual_and_jacobian(keyframes[f.keyframe], f)
        J = np.zeros((6, width))
        base = f.keyframe * STATE_DIM
        J[:, base + 9 : base + 15] = Jb
        rows.append(r)
        blocks.append(J)
    if not rows:
        return np.zeros(0), np.zeros((0, width))
    return np.concatenate(rows), np.vstack(blocks)


def graph_cost(graph: WindowGraph, keyframes: Optional[Sequence[KeyframeState]] = None) -> float:
    r, _ = linearize(graph, keyframes if keyframes is not None else graph.keyframes)
    return 0.5 * float(r @ r)


def _retract_all(keyframes: Sequence[KeyframeState], step: np.ndarray) -> List[KeyframeState]:
    return [kf.retract(step[k * STATE_DIM : (k + 1) * STATE_DIM]) for k, kf in enumerate(keyframes)]


def optimize_window(graph: WindowGraph, options: Optional[LmOptions] = None) -> WindowSolution:
    """Levenberg-Marquardt over the free keyframe variables.

    Steps are only accepted when the cost does not increase. Stops on a small
    relative decrease, a small step or the iteration cap.
    """

    options = options or LmOptions()
    graph.validate()
    keyframes = [kf.copy() for kf in graph.keyframes]
    free = _free_columns(len(keyframes), graph.pinned)
    width = STATE_DIM * len(keyframes)
    r, J = linearize(graph, keyframes)
    cost = 0.5 * float(r @ r)
    history = [cost]
    damping = options.initial_lambda
    reason = "max_iterations"
    iterations = 0

    for iterations in range(1, options.max_iterations + 1):
        Jf = J[:, free]
        H = Jf.T @ Jf
        grad = Jf.T @ r
        scale = float(np.max(np.diag(H))) if H.size else 0.0
        scale = scale if scale > 0 else 1.0
        accepted = False
        while damping <= options.max_lambda:
            damped = H + damping * scale * np.eye(len(free))
            try:
                factor = cho_factor(damped)
            except LinAlgError as exc:
                raise SolverError(
                    "Damped normal matrix is not positive definite",
                    {"lambda": damping, "condition": float(np.linalg.cond(H)), "iteration": iterations},
                ) from exc
            step = np.zeros(width)
            step[free] = -cho_solve(factor, grad)
            candidate = _retract_all(keyframes, step)
            r_new, J_new = linearize(graph, candidate)
            new_cost = 0.5 * float(r_new @ r_new)
            if not math.isfinite(new_cost):
                raise SolverError(
                    "Window cost became non-finite",
                    {"lambda": damping, "iteration": iterations, "cost": cost},
                )
            if new_cost <= cost:
                accepted = True
                damping = max(damping * options.lambda_down, 1e-15)
                break
            damping *= options.lambda_up
        if not accepted:
            reason = "no_decrease"
            break
        decrease = (cost - new_cost) / cost if cost > 0 else 0.0
        keyframes, r, J, cost = candidate, r_new, J_new, new_cost
        history.append(cost)
        if decrease < options.relative_decrease:
            reason = "relative_decrease"
            break
        if float(np.linalg.norm(step)) < options.min_step:
            reason = "small_step"
            break

    return WindowSolution(keyframes, cost, iterations, history, reason)


# ----------------------------------------------------------------------
# Streaming estimator
# ----------------------------------------------------------------------
@dataclass(slots=True, eq=False)
class KeyframeRecord:
    """Final estimate of a keyframe and the prior target attached to it."""

    state: KeyframeState
    prior: Optional[ImuBias] = None


@dataclass(eq=False)
class FusionResult:
    keyframes: List[KeyframeRecord]
    costs: List[float]
    iterations: List[int]

    @property
    def trajectory(self) -> List[KeyframeState]:
        return [rec.state for rec in self.keyframes]

    def bias_estimates(self) -> List[Tuple[float, ImuBias]]:
        return [(rec.state.timestamp, rec.state.bias) for rec in self.keyframes]


@dataclass(slots=True, eq=False)
class _Slot:
    state: KeyframeState
    observation: Optional[PoseObservation]
    prior: Optional[ImuBias]
    preint: Optional[Preintegration] = None


class _ObservationIndex:
    def __init__(self, observations: Sequence[PoseObservation], tolerance: float) -> None:
        self.items = sorted(observations, key=lambda o: o.timestamp)
        self.stamps = np.array([o.timestamp for o in self.items], dtype=np.float64)
        self.tolerance = tolerance

    def at(self, t: float) -> Optional[PoseObservation]:
        if not self.items:
            return None
        j = int(np.searchsorted(self.stamps, t))
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(self.items) and abs(self.stamps[cand] - t) <= self.tolerance:
                if best is None or abs(self.stamps[cand] - t) < abs(self.stamps[best] - t):
                    best = cand
        if best is None or self.items[best].dropped:
            return None
        return self.items[best]

    def after(self, t: float) -> Optional[PoseObservation]:
        for j in range(int(np.searchsorted(self.stamps, t + self.tolerance, side="right")), len(self.items)):
            if not self.items[j].dropped:
                return self.items[j]
        return None


def _latest_prior(priors: Sequence[PriorEstimate], t: float, use_warmup: bool) -> Optional[ImuBias]:
    chosen = None
    for est in priors:
        if est.timestamp > t + 1e-9:
            break
        if est.warmup and not use_warmup:
            continue
        chosen = est.bias
    return chosen


def _initial_state(
    t0: float, index: _ObservationIndex, initial_state: Optional[KeyframeState]
) -> KeyframeState:
    if initial_state is not None:
        state = initial_state.copy()
        state.timestamp = t0
        return state
    first = index.at(t0)
    second = index.after(t0)
    if first is None or second is None:
        raise FusionError("Cannot initialize: need pose observations at the first keyframe and after it")
    velocity = (np.asarray(second.position) - np.asarray(first.position)) / (second.timestamp - first.timestamp)
    return KeyframeState(t0, np.asarray(first.position, dtype=np.float64).copy(), velocity, first.orientation)


def _check_stream(stamps: np.ndarray, period: float) -> None:
    if len(stamps) < 2:
        raise FusionError("IMU stream needs at least 2 samples")
    steps = np.diff(stamps)
    if np.any(steps <= 0):
        raise FusionError("IMU timestamps must be strictly increasing")
    if steps.max() > period:
        worst = int(np.argmax(steps))
        raise FusionError(f"IMU gap of {steps[worst]:.3f} s at t={stamps[worst]:.3f} exceeds keyframe period {period}")


def _build_graph(slots: Sequence[_Slot], config: FusionConfig) -> WindowGraph:
    keyframes = [slot.state for slot in slots]
    graph = WindowGraph(keyframes=keyframes, gravity=config.gravity)
    for k in range(1, len(slots)):
        preint = slots[k].preint
        graph.imu_factors.append(ImuFactor(k - 1, k, preint, config.imu_sqrt_info(preint.dt_total)))
    info = config.observation_info()
    W = config.prior_weight()
    latest = slots[-1].prior
    for k, slot in enumerate(slots):
        if slot.observation is not None:
            graph.pose_factors.append(PoseFactor(k, slot.observation, info))
        target = latest if config.retroactive_prior else slot.prior
        if config.prior_enabled and target is not None:
            graph.prior_factors.append(BiasPriorFactor(target, W, k))
    return graph


def run_fixed_lag(
    imu: Sequence[ImuSample],
    observations: Sequence[PoseObservation],
    priors: Optional[Sequence[PriorEstimate]],
    config: Optional[FusionConfig] = None,
    initial_state: Optional[KeyframeState] = None,
) -> FusionResult:
    """Slide a fixed-lag window over the streams and return every keyframe estimate."""

    config = config or FusionConfig()
    stamps = np.array([s.timestamp for s in imu], dtype=np.float64)
    _check_stream(stamps, config.keyframe_period)
    t0 = float(stamps[0])
    count = int(math.floor((stamps[-1] - t0) / config.keyframe_period + 1e-9))
    boundaries = np.searchsorted(stamps, t0 + config.keyframe_period * np.arange(count + 1) - 1e-9)
    index = _ObservationIndex(observations, config.obs_tolerance)
    prior_stream = sorted(priors or [], key=lambda e: e.timestamp)
    use_prior = config.prior_enabled and bool(prior_stream)

    def prior_at(t: float) -> Optional[ImuBias]:
        return _latest_prior(prior_stream, t, config.use_warmup_prior) if use_prior else None

    first = _initial_state(t0, index, initial_state)
    window: List[_Slot] = [_Slot(first, index.at(t0), prior_at(t0))]
    emitted: List[KeyframeRecord] = []
    costs: List[float] = []
    iterations: List[int] = []

    for k in range(count):
        lo, hi = int(boundaries[k]), int(boundaries[k + 1])
        if hi >= len(imu) or hi <= lo:
            break
        newest = window[-1].state
        preint = integrate(imu[lo : hi + 1], newest.bias)
        predicted = propagate(newest, preint, config.gravity)
        predicted.timestamp = float(stamps[hi])
        window.append(_Slot(predicted, index.at(predicted.timestamp), prior_at(predicted.timestamp), preint))
        if len(window) > config.lag:
            dropped = window.pop(0)
            emitted.append(KeyframeRecord(dropped.state, dropped.prior))
            window[0].preint = None
        graph = _build_graph(window, config)
        try:
            solution = optimize_window(graph, config.lm)
        except GeometryError as exc:
            raise SolverError(f"Window update produced an invalid rotation: {exc}", {"keyframe": k + 1}) from exc
        for slot, state in zip(window, solution.keyframes):
            slot.state = state
        costs.append(solution.cost)
        iterations.append(solution.iterations)
        logger.debug(
            "keyframe %d t=%.3f cost=%.6g iterations=%d (%s)",
            k + 1,
            predicted.timestamp,
            solution.cost,
            solution.iterations,
            solution.reason,
        )

    emitted.extend(KeyframeRecord(slot.state, slot.prior) for slot in window)
    logger.info("Fixed-lag run produced %d keyframes", len(emitted))
    return FusionResult(keyframes=emitted, costs=costs, iterations=iterations)


def simulate_observations(
    ground_truth: Sequence[GroundTruthState],
    rate_hz: float = 20.0,
    position_sigma: float = 0.0,
    rotation_sigma: float = 0.0,
    dropouts: Sequence[Tuple[float, float]] = (),
    seed: int = 0,
) -> List[PoseObservation]:
    """Noisy pose fixes sampled from ground truth.

    Observations inside any ``[start, end)`` dropout window are marked dropped.
    """

    if not ground_truth:
        return []
    stamps = np.array([s.timestamp for s in ground_truth])
    rng = np.random.default_rng(seed)
    count = int(math.floor((stamps[-1] - stamps[0]) * rate_hz + 1e-9)) + 1
    targets = stamps[0] + np.arange(count) / rate_hz
    out: List[PoseObservation] = []
    for j in np.unique(np.searchsorted(stamps, targets - 1e-9)):
        state = ground_truth[min(int(j), len(ground_truth) - 1)]
        position = np.asarray(state.position) + rng.standard_normal(3) * position_sigma
        rotation = quat_multiply(state.orientation, quat_from_rotvec(rng.standard_normal(3) * rotation_sigma))
        dropped = any(start <= state.timestamp < end for start, end in dropouts)
        out.append(PoseObservation(state.timestamp, position, rotation, dropped))
    return out


__all__ = [
    "BiasPriorFactor",
    "FusionConfig",
    "FusionError",
    "FusionResult",
    "ImuFactor",
    "KeyframeRecord",
    "KeyframeState",
    "LmOptions",
    "PoseFactor",
    "PoseObservation",
    "SolverError",
    "WindowGraph",
    "WindowSolution",
    "graph_cost",
    "imu_factor_residual",
    "linearize",
    "optimize_window",
    "pose_obs_residual",
    "prior_residual_and_jacobian",
    "propagate",
    "run_fixed_lag",
    "simulate_observations",
]
