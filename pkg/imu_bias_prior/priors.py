"""Bias prior sources consumed by the fixed-lag estimator."""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from .dataset import DatasetError, SequenceBundle, load_weights, read_prior_csv
from .imu_model import BiasBounds, ImuBias, ImuModelError
from .ipnet import ModelWeights, PriorEstimate, sliding_inference

logger = logging.getLogger(__name__)

PRIOR_MODES = ("off", "oracle", "network", "file")


class BiasPriorSource(ABC):
    """Produces the timestamped prior stream for one sequence."""

    name: str = "prior"

    @abstractmethod
    def estimates(self, bundle: SequenceBundle) -> List[PriorEstimate]:
        """Return prior estimates for ``bundle`` in time order."""


class NoPrior(BiasPriorSource):
    name = "off"

    def estimates(self, bundle: SequenceBundle) -> List[PriorEstimate]:
        return []


class OraclePrior(BiasPriorSource):
    """Constant target from a label, an explicit bias, or the truth sidecar.

    Lookup order per sequence: ``labels[sequence_id]``, then ``target``, then
    ``bundle.truth["mean_bias"]``. The resolved bias must lie inside ``bounds``.
    """

    name = "oracle"

    def __init__(
        self,
        labels: Optional[Mapping[str, ImuBias]] = None,
        target: Optional[ImuBias] = None,
        bounds: Optional[BiasBounds] = None,
    ) -> None:
        self.labels: Dict[str, ImuBias] = dict(labels or {})
        self.target = target
        self.bounds = bounds or BiasBounds()

    def resolve(self, bundle: SequenceBundle) -> ImuBias:
        bias = self._lookup(bundle)
        try:
            return self.bounds.check(bias)
        except ImuModelError as exc:
            raise DatasetError(
                f"Oracle bias for sequence '{bundle.sequence_id}' is implausible: {exc}", bundle.source or None
            ) from exc

    def _lookup(self, bundle: SequenceBundle) -> ImuBias:
        if bundle.sequence_id in self.labels:
            return self.labels[bundle.sequence_id]
        if self.target is not None:
            return self.target
        mean_bias = bundle.truth.get("mean_bias") if bundle.truth else None
        if mean_bias is None:
            raise DatasetError(
                f"No oracle bias for sequence '{bundle.sequence_id}': supply a label or a truth sidecar",
                bundle.source or None,
            )
        try:
            return ImuBias.from_dict(mean_bias)
        except (ImuModelError, KeyError, TypeError) as exc:
            raise DatasetError(f"invalid mean_bias in truth sidecar: {exc}", bundle.source or None) from exc

    def estimates(self, bundle: SequenceBundle) -> List[PriorEstimate]:
        if not bundle.imu:
            return []
        return [PriorEstimate(bundle.imu[0].timestamp, self.resolve(bundle))]


class NetworkPrior(BiasPriorSource):
    """Sliding-window network predictions over the sequence's IMU stream."""

    name = "network"

    def __init__(
        self,
        weights: ModelWeights,
        initial_prior: Optional[ImuBias] = None,
        bounds: Optional[BiasBounds] = None,
    ) -> None:
        self.weights = weights
        self.initial_prior = initial_prior
        self.bounds = bounds

    @classmethod
    def from_file(cls, path: Path, bounds: Optional[BiasBounds] = None) -> "NetworkPrior":
        return cls(load_weights(path), bounds=bounds)

    def estimates(self, bundle: SequenceBundle) -> List[PriorEstimate]:
        out = sliding_inference(bundle.imu, self.weights, self.initial_prior, bounds=self.bounds)
        logger.debug("Network prior produced %d estimates for %s", len(out), bundle.sequence_id)
        return out


class FilePrior(BiasPriorSource):
    """Prior stream read from a CSV written by ``infer``.

    ``path`` may be a single file used for every sequence or a directory holding
    ``<sequence_id>.csv`` files.
    """

    name = "file"

    def __init__(self, path: Path, bounds: Optional[BiasBounds] = None) -> None:
        self.path = Path(path)
        self.bounds = bounds

    def estimates(self, bundle: SequenceBundle) -> List[PriorEstimate]:
        target = self.path / f"{bundle.sequence_id}.csv" if self.path.is_dir() else self.path
        return read_prior_csv(target, self.bounds)


def build_prior_source(
    spec: str,
    weights_path: Optional[Path] = None,
    labels: Optional[Mapping[str, ImuBias]] = None,
    bounds: Optional[BiasBounds] = None,
) -> BiasPriorSource:
    """Parse ``off | oracle | network | file:PATH``."""

    mode, _, argument = spec.partition(":")
    if mode == "off":
        return NoPrior()
    if mode == "oracle":
        return OraclePrior(labels, bounds=bounds)
    if mode == "network":
        if weights_path is None:
            raise ValueError("--prior network requires --weights")
        return NetworkPrior.from_file(weights_path, bounds)
    if mode == "file":
        if not argument:
            raise ValueError("--prior file:PATH requires a path")
        return FilePrior(Path(argument), bounds)
    raise ValueError(f"Unknown prior mode '{spec}', expected one of off, oracle, network, file:PATH")


__all__ = [
    "BiasPriorSource",
    "FilePrior",
    "NetworkPrior",
    "NoPrior",
    "OraclePrior",
    "PRIOR_MODES",
    "build_prior_source",
]
