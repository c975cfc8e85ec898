"""IMU bias labels, a learned bias prior and fixed-lag visual-inertial fusion."""

from .bias_labeler import LabelingConfig, LabelingError, LabelResult, OptSchedule, make_labels
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, SequenceBundle, load_weights, read_euroc_sequence, save_weights
from .evaluation import AlignmentError, EvalConfig, Trajectory, ate_rmse, evaluate, rpe_rmse
from .fusion import (
    BiasPriorFactor,
    FusionConfig,
    FusionError,
    KeyframeState,
    SolverError,
    optimize_window,
    run_fixed_lag,
)
from .geom import GeometryError, UnitQuaternion, quat_from_rotvec, quat_log, quat_multiply, quat_rotate
from .imu_model import GravityConfig, ImuBias, ImuSample, NoiseSpec, TrajectorySpec, synthesize_sequence
from .ipnet import IpnetConfig, ModelWeights, NetworkError, PriorEstimate, TrainingSchedule, sliding_inference, train
from .preintegration import Preintegration, PreintegrationError, integrate
from .priors import BiasPriorSource, FilePrior, NetworkPrior, NoPrior, OraclePrior, build_prior_source

__all__ = [
    "AlignmentError",
    "BiasPriorFactor",
    "BiasPriorSource",
    "ConfigError",
    "DatasetError",
    "EvalConfig",
    "FilePrior",
    "FusionConfig",
    "FusionError",
    "GeometryError",
    "GravityConfig",
    "ImuBias",
    "ImuSample",
    "IpnetConfig",
    "KeyframeState",
    "LabelResult",
    "LabelingConfig",
    "LabelingError",
    "ModelWeights",
    "NetworkError",
    "NetworkPrior",
    "NoPrior",
    "NoiseSpec",
    "OptSchedule",
    "OraclePrior",
    "Preintegration",
    "PreintegrationError",
    "PriorEstimate",
    "RunConfig",
    "SequenceBundle",
    "SolverError",
    "TrainingSchedule",
    "Trajectory",
    "TrajectorySpec",
    "UnitQuaternion",
    "ate_rmse",
    "build_prior_source",
    "evaluate",
    "integrate",
    "load_config",
    "load_weights",
    "make_labels",
    "optimize_window",
    "quat_from_rotvec",
    "quat_log",
    "quat_multiply",
    "quat_rotate",
    "read_euroc_sequence",
    "rpe_rmse",
    "run_fixed_lag",
    "save_weights",
    "synthesize_sequence",
    "sliding_inference",
    "train",
]
