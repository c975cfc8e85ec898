"""Trajectory accuracy metrics and label / run comparisons."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geom import UnitQuaternion, quat_multiply, rotation_angle

logger = logging.getLogger(__name__)

DEFAULT_MAX_GAP = 0.02


class AlignmentError(ValueError):
    """Raised for empty associations or degenerate alignment geometry."""


@dataclass(slots=True)
class EvalConfig:
    max_gap: float = DEFAULT_MAX_GAP
    rpe_delta: int = 1
    divergence_ate: float = 10.0

    def __post_init__(self) -> None:
        if self.rpe_delta < 1:
            raise ValueError("rpe_delta must be at least 1")
        if not self.max_gap > 0:
            raise ValueError("max_gap must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalConfig":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(slots=True, eq=False)
class Trajectory:
    """Time-sorted poses: ``stamps`` (N,), ``positions`` (N, 3), ``orientations``."""

    stamps: np.ndarray
    positions: np.ndarray
    orientations: List[UnitQuaternion] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.stamps = np.asarray(self.stamps, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not self.orientations:
            self.orientations = [UnitQuaternion.identity()] * len(self.stamps)
        if not len(self.stamps) == len(self.positions) == len(self.orientations):
            raise ValueError("stamps, positions and orientations must have equal length")
        order = np.argsort(self.stamps, kind="stable")
        if np.any(order != np.arange(len(order))):
            self.stamps = self.stamps[order]
            self.positions = self.positions[order]
            self.orientations = [self.orientations[i] for i in order]

    def __len__(self) -> int:
        return len(self.stamps)

    @classmethod
    def from_states(cls, states: Sequence[Any]) -> "Trajectory":
        """Build from ground-truth states (``position``/``orientation``) or keyframes (``p``/``q``)."""

        stamps = [s.timestamp for s in states]
        positions = [s.position if hasattr(s, "position") else s.p for s in states]
        orientations = [s.orientation if hasattr(s, "orientation") else s.q for s in states]
        return cls(np.array(stamps), np.array(positions, dtype=np.float64).reshape(-1, 3), list(orientations))

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        idx = list(indices)
        return Trajectory(self.stamps[idx], self.positions[idx], [self.orientations[i] for i in idx])


@dataclass(slots=True, eq=False)
class AlignedPair:
    est: Trajectory
    gt: Trajectory
    rotation: np.ndarray
    translation: np.ndarray

    def aligned_positions(self) -> np.ndarray:
        return self.est.positions @ self.rotation.T + self.translation


def associate(est: Trajectory, gt: Trajectory, max_gap: float = DEFAULT_MAX_GAP) -> List[Tuple[int, int]]:
    """Injective nearest-timestamp matching, closest pairs first.

    Returns ``(est_index, gt_index)`` pairs sorted by estimate time.
    """

    if len(est) == 0 or len(gt) == 0:
        return []
    candidates: List[Tuple[float, int, int]] = []
    for i, t in enumerate(est.stamps):
        j = int(np.searchsorted(gt.stamps, t))
        for cand in (j - 1, j):
            if 0 <= cand < len(gt):
                gap = abs(gt.stamps[cand] - t)
                if gap <= max_gap:
                    candidates.append((gap, i, cand))
    candidates.sort()
    used_est: set = set()
    used_gt: set = set()
    pairs: List[Tuple[int, int]] = []
    for _, i, j in candidates:
        if i in used_est or j in used_gt:
            continue
        used_est.add(i)
        used_gt.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def align_se3(est_positions: np.ndarray, gt_positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rigid ``(R, t)`` minimizing ``sum |R p_est + t - p_gt|^2`` (no scale)."""

    est_positions = np.asarray(est_positions, dtype=np.float64).reshape(-1, 3)
    gt_positions = np.asarray(gt_positions, dtype=np.float64).reshape(-1, 3)
    if len(est_positions) != len(gt_positions):
        raise AlignmentError("Aligned position sets must have equal length")
    if len(est_positions) < 3:
        raise AlignmentError(f"Alignment needs at least 3 positions, got {len(est_positions)}")
    mu_est = est_positions.mean(axis=0)
    mu_gt = gt_positions.mean(axis=0)
    cov = (gt_positions - mu_gt).T @ (est_positions - mu_est) / len(est_positions)
    U, s, Vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise AlignmentError("Degenerate geometry: associated positions are collinear or coincident")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_gt - R @ mu_est


def align_trajectories(est: Trajectory, gt: Trajectory, max_gap: float = DEFAULT_MAX_GAP) -> AlignedPair:
    pairs = associate(est, gt, max_gap)
    if not pairs:
        raise AlignmentError("No estimate/ground-truth poses associate within the time gap")
    est_sub = est.subset([i for i, _ in pairs])
    gt_sub = gt.subset([j for _, j in pairs])
    R, t = align_se3(est_sub.positions, gt_sub.positions)
    return AlignedPair(est_sub, gt_sub, R, t)


def ate_rmse(est: Trajectory, gt: Trajectory, max_gap: float = DEFAULT_MAX_GAP) -> float:
    """Position RMSE after rigid alignment, in meters."""

    pair = align_trajectories(est, gt, max_gap)
    errors = pair.aligned_positions() - pair.gt.positions
    return float(math.sqrt(np.mean(np.sum(errors * errors, axis=1))))


def rpe_rmse(est: Trajectory, gt: Trajectory, delta: int = 1, max_gap: float = DEFAULT_MAX_GAP) -> float:
    """RMSE of the relative rotation error over ``delta`` associated poses, in radians."""

    if delta < 1:
        raise ValueError("delta must be at least 1")
    pairs = associate(est, gt, max_gap)
    if len(pairs) <= delta:
        raise AlignmentError(f"Need more than {delta} associated poses for RPE, got {len(pairs)}")
    angles = []
    for (i0, j0), (i1, j1) in zip(pairs[:-delta], pairs[delta:]):
        rel_gt = quat_multiply(gt.orientations[j0].conjugate(), gt.orientations[j1])
        rel_est = quat_multiply(est.orientations[i0].conjugate(), est.orientations[i1])
        angles.append(rotation_angle(quat_multiply(rel_gt.conjugate(), rel_est)))
    return float(math.sqrt(np.mean(np.square(angles))))


def evaluate(est: Trajectory, gt: Trajectory, config: Optional[EvalConfig] = None) -> Dict[str, Any]:
    """Metric report ``{ate_rmse_m, rpe_rmse_rad, n_associated, alignment}``."""

    config = config or EvalConfig()
    pair = align_trajectories(est, gt, config.max_gap)
    errors = pair.aligned_positions() - pair.gt.positions
    ate = float(math.sqrt(np.mean(np.sum(errors * errors, axis=1))))
    rpe = rpe_rmse(est, gt, config.rpe_delta, config.max_gap)
    logger.info("ATE %.6f m, RPE %.6f rad over %d poses", ate, rpe, len(pair.est))
    return {
        "ate_rmse_m": ate,
        "rpe_rmse_rad": rpe,
        "n_associated": len(pair.est),
        "alignment": {"rotation": pair.rotation.tolist(), "translation": pair.translation.tolist()},
        "diverged": ate > config.divergence_ate,
    }


# ----------------------------------------------------------------------
# Label accuracy and run comparison
# ----------------------------------------------------------------------
def label_fit(labels: np.ndarray, truths: np.ndarray) -> List[Dict[str, float]]:
    """Per-axis least-squares line ``label = slope * truth + intercept``.

    ``labels`` and ``truths`` are ``(sequences, axes)``; each axis reports
    ``slope``, ``intercept`` and the Pearson correlation.
    """

    labels = np.asarray(labels, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if labels.shape != truths.shape or labels.ndim != 2 or labels.shape[0] < 2:
        raise ValueError("label_fit needs matching (sequences, axes) arrays with at least 2 sequences")
    out = []
    for axis in range(labels.shape[1]):
        x, y = truths[:, axis], labels[:, axis]
        if np.ptp(x) == 0:
            out.append({"slope": float("nan"), "intercept": float("nan"), "pearson": float("nan")})
            continue
        slope, intercept = np.polyfit(x, y, 1)
        pearson = float(np.corrcoef(x, y)[0, 1]) if np.ptp(y) > 0 else float("nan")
        out.append({"slope": float(slope), "intercept": float(intercept), "pearson": pearson})
    return out


def compare_reports(
    baseline: Dict[str, Dict[str, Any]],
    candidate: Dict[str, Dict[str, Any]],
    divergence_ate: Optional[float] = None,
) -> Dict[str, Any]:
    """Relative ATE/RPE improvement of ``candidate`` over ``baseline`` per sequence.

    Sequences where either run diverged are flagged and left out of the means.
    """

    rows: Dict[str, Dict[str, Any]] = {}
    ate_gain: List[float] = []
    rpe_gain: List[float] = []
    for seq_id in sorted(set(baseline) & set(candidate)):
        base, cand = baseline[seq_id], candidate[seq_id]
        limit = divergence_ate
        diverged = bool(base.get("diverged") or cand.get("diverged"))
        if limit is not None:
            diverged = diverged or base["ate_rmse_m"] > limit or cand["ate_rmse_m"] > limit
        row = {"diverged": diverged}
        for key, bucket in (("ate_rmse_m", ate_gain), ("rpe_rmse_rad", rpe_gain)):
            ref = float(base[key])
            gain = 100.0 * (ref - float(cand[key])) / ref if ref > 0 else 0.0
            row[f"{key}_improvement_pct"] = gain
            if not diverged:
                bucket.append(gain)
        rows[seq_id] = row
    return {
        "sequences": rows,
        "mean_ate_improvement_pct": float(np.mean(ate_gain)) if ate_gain else float("nan"),
        "mean_rpe_improvement_pct": float(np.mean(rpe_gain)) if rpe_gain else float("nan"),
    }


__all__ = [
    "AlignedPair",
    "AlignmentError",
    "EvalConfig",
    "Trajectory",
    "align_se3",
    "align_trajectories",
    "associate",
    "ate_rmse",
    "compare_reports",
    "evaluate",
    "label_fit",
    "rpe_rmse",
]
