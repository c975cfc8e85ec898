"""Run configuration: one document covering synthesis, labeling, training, fusion and eval."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

try:  # Python 3.11+
    import tomllib  # type: ignore[attr-defined]
except ModuleNotFoundError:  # pragma: no cover - fallback for older versions
    tomllib = None  # type: ignore[assignment]

from .bias_labeler import LabelingConfig, OptSchedule
from .evaluation import EvalConfig
from .fusion import FusionConfig, FusionError, LmOptions
from .imu_model import BiasBounds, GravityConfig, ImuBias, ImuModelError, NoiseSpec, TrajectorySpec
from .ipnet import IpnetConfig, TrainingSchedule
from .utils import config_hash


class ConfigError(ValueError):
    """Raised when a run configuration fails schema validation."""


DEFAULT_TRAJECTORY: Dict[str, Any] = {
    "pos_amplitude": [1.0, 1.0, 0.5],
    "pos_frequency": [0.1, 0.13, 0.07],
    "att_amplitude": [0.1, 0.1, 0.5],
    "att_frequency": [0.05, 0.07, 0.03],
    "duration": 60.0,
}


@dataclass(slots=True)
class SequenceSpec:
    """One synthetic sequence: id, injected bias and optional motion overrides."""

    id: str
    ba: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    bw: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    seed: Optional[int] = None
    trajectory: Dict[str, Any] = field(default_factory=dict)

    @property
    def bias(self) -> ImuBias:
        return ImuBias(self.ba, self.bw)


@dataclass(slots=True)
class SynthesisConfig:
    trajectory: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_TRAJECTORY))
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    gravity: GravityConfig = field(default_factory=GravityConfig)
    sequences: List[SequenceSpec] = field(
        default_factory=lambda: [SequenceSpec("seq00", [0.05, -0.02, 0.03], [0.002, -0.001, 0.0015])]
    )

    def trajectory_for(self, spec: SequenceSpec) -> TrajectorySpec:
        merged = dict(self.trajectory)
        merged.update(spec.trajectory)
        return TrajectorySpec.from_dict(merged)


@dataclass(slots=True)
class ObservationConfig:
    """Vision surrogate: pose fixes sampled from ground truth."""

    rate_hz: float = 20.0
    position_sigma: float = 0.0
    rotation_sigma: float = 0.0
    dropouts: List[Tuple[float, float]] = field(default_factory=list)
    init_from_truth: bool = True


@dataclass(slots=True)
class FusionSection:
    estimator: FusionConfig = field(default_factory=FusionConfig)
    observations: ObservationConfig = field(default_factory=ObservationConfig)


@dataclass(slots=True)
class TrainingSection:
    ipnet: IpnetConfig = field(default_factory=IpnetConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)


@dataclass(slots=True)
class RunConfig:
    """Top-level configuration consumed by every CLI subcommand."""

    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bounds: BiasBounds = field(default_factory=BiasBounds)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Validate ``data`` section by section; unknown keys raise :class:`ConfigError`."""

        _check_keys(data, ("synthesis", "labeling", "training", "fusion", "eval", "bounds", "seed"), "")
        return cls(
            synthesis=_synthesis(data.get("synthesis", {}), "synthesis"),
            labeling=_labeling(data.get("labeling", {}), "labeling"),
            training=_training(data.get("training", {}), "training"),
            fusion=_fusion(data.get("fusion", {}), "fusion"),
            eval=_build(EvalConfig, data.get("eval", {}), "eval"),
            bounds=_build(BiasBounds, data.get("bounds", {}), "bounds"),
            seed=_integer(data.get("seed", 0), "seed"),
        )

    def to_dict(self) -> Dict[str, Any]:
        synthesis = self.synthesis
        return {
            "synthesis": {
                "trajectory": dict(synthesis.trajectory),
                "noise": dataclasses.asdict(synthesis.noise),
                "gravity": synthesis.gravity.to_dict(),
                "sequences": [dataclasses.asdict(s) for s in synthesis.sequences],
            },
            "labeling": self.labeling.to_dict(),
            "training": {
                "ipnet": self.training.ipnet.to_dict(),
                "schedule": self.training.schedule.to_dict(),
            },
            "fusion": {
                **self.fusion.estimator.to_dict(),
                "observations": {
                    **dataclasses.asdict(self.fusion.observations),
                    "dropouts": [list(w) for w in self.fusion.observations.dropouts],
                },
            },
            "eval": self.eval.to_dict(),
            "bounds": self.bounds.to_dict(),
            "seed": self.seed,
        }

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=int(seed))

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ----------------------------------------------------------------------
# Section builders
# ----------------------------------------------------------------------
def _dotted(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _check_keys(data: Any, allowed: Sequence[str], path: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"Unknown config key '{_dotted(path, str(key))}'")


def _fields(cls: type) -> Tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(cls))


def _build(cls: Callable[..., Any], data: Any, path: str, **extra: Any) -> Any:
    _check_keys(data, _fields(cls), path)  # type: ignore[arg-type]
    try:
        return cls(**data, **extra)
    except (TypeError, ValueError, ImuModelError, FusionError) as exc:
        raise ConfigError(f"Invalid {path}: {exc}") from exc


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _gravity(data: Any, path: str) -> GravityConfig:
    return _build(GravityConfig, data, path) if data else GravityConfig()


def _synthesis(data: Any, path: str) -> SynthesisConfig:
    _check_keys(data, _fields(SynthesisConfig), path)
    trajectory = dict(DEFAULT_TRAJECTORY)
    raw_trajectory = data.get("trajectory", {})
    _check_keys(raw_trajectory, _fields(TrajectorySpec), _dotted(path, "trajectory"))
    trajectory.update(raw_trajectory)
    _build(TrajectorySpec, trajectory, _dotted(path, "trajectory"))

    sequences: List[SequenceSpec] = []
    raw_sequences = data.get("sequences")
    if raw_sequences is None:
        sequences = SynthesisConfig().sequences
    else:
        if not isinstance(raw_sequences, list) or not raw_sequences:
            raise ConfigError(f"{path}.sequences must be a non-empty list")
        for index, item in enumerate(raw_sequences):
            item_path = f"{path}.sequences[{index}]"
            spec = _build(SequenceSpec, item, item_path)
            _check_keys(spec.trajectory, _fields(TrajectorySpec), _dotted(item_path, "trajectory"))
            try:
                spec.bias
            except ImuModelError as exc:
                raise ConfigError(f"Invalid {item_path}: {exc}") from exc
            sequences.append(spec)
        ids = [s.id for s in sequences]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{path}.sequences contains duplicate ids")

    return SynthesisConfig(
        trajectory=trajectory,
        noise=_build(NoiseSpec, data.get("noise", {}), _dotted(path, "noise")),
        gravity=_gravity(data.get("gravity"), _dotted(path, "gravity")),
        sequences=sequences,
    )


def _labeling(data: Any, path: str) -> LabelingConfig:
    _check_keys(data, _fields(LabelingConfig), path)
    for channel in ("gyro", "accel"):
        _check_keys(data.get(channel, {}), _fields(OptSchedule), _dotted(path, channel))
    if data.get("gravity"):
        _check_keys(data["gravity"], _fields(GravityConfig), _dotted(path, "gravity"))
    try:
        return LabelingConfig.from_dict(dict(data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid {path}: {exc}") from exc


def _training(data: Any, path: str) -> TrainingSection:
    _check_keys(data, _fields(TrainingSection), path)
    return TrainingSection(
        ipnet=_build(IpnetConfig, data.get("ipnet", {}), _dotted(path, "ipnet")),
        schedule=_build(TrainingSchedule, data.get("schedule", {}), _dotted(path, "schedule")),
    )


def _fusion(data: Any, path: str) -> FusionSection:
    _check_keys(data, _fields(FusionConfig) + ("observations",), path)
    payload = {k: v for k, v in data.items() if k not in ("observations", "lm", "gravity")}
    lm = _build(LmOptions, data.get("lm", {}), _dotted(path, "lm"))
    gravity = _gravity(data.get("gravity"), _dotted(path, "gravity"))
    estimator = _build(FusionConfig, payload, path, lm=lm, gravity=gravity)

    obs_path = _dotted(path, "observations")
    observations = _build(ObservationConfig, data.get("observations", {}), obs_path)
    windows: List[Tuple[float, float]] = []
    for window in observations.dropouts:
        if len(window) != 2 or not float(window[0]) < float(window[1]):
            raise ConfigError(f"{obs_path}.dropouts entries must be [start, end) with start < end, got {window}")
        windows.append((float(window[0]), float(window[1])))
    observations.dropouts = windows
    return FusionSection(estimator=estimator, observations=observations)


# ----------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------
def _load_json(path: Path) -> Dict[str, Any]:
    with path.open("r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def _load_yaml(path: Path) -> Dict[str, Any]:
    try:
        import yaml  # type: ignore[import-not-found]
    except ModuleNotFoundError as exc:  # pragma: no cover - optional dependency
        raise RuntimeError(
            "PyYAML is required to load YAML configuration files. Install it via 'pip install pyyaml'."
        ) from exc
    with path.open("r", encoding="utf-8") as fh:
        return yaml.safe_load(fh)


def _load_toml(path: Path) -> Dict[str, Any]:
    if tomllib is None:  # pragma: no cover - Python < 3.11 fallback
        raise RuntimeError("TOML configuration files require Python 3.11 or newer.")
    with path.open("rb") as fh:
        return tomllib.load(fh)


def load_config(path: Union[str, os.PathLike[str], None]) -> RunConfig:
    """Load a run configuration from JSON, YAML, or TOML; ``None`` gives the defaults."""

    if path is None:
        return RunConfig()
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {file_path}")

    suffix = file_path.suffix.lower()
    if suffix == ".json":
        data = _load_json(file_path)
    elif suffix in {".yml", ".yaml"}:
        data = _load_yaml(file_path)
    elif suffix == ".toml":
        data = _load_toml(file_path)
    else:
        raise ConfigError(f"Unsupported configuration format: {suffix}")

    if not isinstance(data, dict):
        raise ConfigError("Configuration file must contain a dictionary at the top level.")

    return RunConfig.from_dict(data)


__all__ = [
    "ConfigError",
    "FusionSection",
    "ObservationConfig",
    "RunConfig",
    "SequenceSpec",
    "SynthesisConfig",
    "TrainingSection",
    "load_config",
]
