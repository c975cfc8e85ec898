"""Per-sequence orchestration behind the CLI subcommands."""

from __future__ import annotations

import dataclasses
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .bias_labeler import interpolate_state, make_labels, states_from_poses
from .config import RunConfig
from .dataset import (
    DatasetError,
    SequenceBundle,
    load_weights,
    read_euroc_sequence,
    read_label,
    read_tum,
    save_weights,
    write_bias_csv,
    write_epoch_log,
    write_json,
    write_label,
    write_prior_csv,
    write_synthetic_euroc,
    write_tum,
)
from .evaluation import Trajectory, compare_reports, evaluate, label_fit
from .fusion import KeyframeState, run_fixed_lag, simulate_observations
from .imu_model import BiasBounds, ImuBias, synthesize_sequence
from .ipnet import LabeledSequence, ModelWeights, imu_matrix, init_weights, sliding_inference, train
from .priors import OraclePrior, build_prior_source
from .utils import percentile_summary

logger = logging.getLogger(__name__)

T = TypeVar("T")


def run_parallel(fn: Callable[[T], Dict[str, Any]], items: Sequence[T], workers: int = 1) -> List[Dict[str, Any]]:
    """Apply ``fn`` to every item, in a process pool when ``workers > 1``.

    Results are ordered by ``sequence_id`` regardless of completion order.
    """

    if workers <= 1 or len(items) <= 1:
        results = [fn(item) for item in items]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, items))
    return sorted(results, key=lambda r: r["sequence_id"])


def discover_sequences(root: Path) -> List[Path]:
    """``root`` itself if it holds ``mav0/``, else its sequence subdirectories sorted by name."""

    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"Data directory not found: {root}")
    if (root / "mav0").is_dir():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "mav0").is_dir())
    if not found:
        raise DatasetError("no EuRoC-layout sequences (mav0/) found", root)
    return found


def _sequence_seed(run_seed: int, key: str) -> int:
    return (run_seed * 1_000_003 + zlib.crc32(key.encode("utf-8"))) % (2**32)


# ----------------------------------------------------------------------
# gen-synthetic
# ----------------------------------------------------------------------
def synthesize_bundle(config: RunConfig, index: int) -> SequenceBundle:
    synthesis = config.synthesis
    spec = synthesis.sequences[index]
    seed = spec.seed if spec.seed is not None else _sequence_seed(config.seed, spec.id)
    noise = dataclasses.replace(synthesis.noise, rng_seed=seed)
    trajectory = synthesis.trajectory_for(spec)
    sequence = synthesize_sequence(trajectory, spec.bias, noise, synthesis.gravity)
    truth = {
        "sequence_id": spec.id,
        "injected_bias": spec.bias.to_dict(),
        "mean_bias": sequence.mean_bias().to_dict(),
        "trajectory": trajectory.to_dict(),
        "noise": dataclasses.asdict(noise),
        "gravity": synthesis.gravity.to_dict(),
        "config_hash": config.hash(),
    }
    return SequenceBundle(spec.id, sequence.samples, sequence.ground_truth, source="synthetic", truth=truth)


def _generate_one(index: int, config: RunConfig, out_dir: Path) -> Dict[str, Any]:
    bundle = synthesize_bundle(config, index)
    path = write_synthetic_euroc(bundle, out_dir / bundle.sequence_id)
    logger.info("Wrote %s (%d IMU samples)", path, len(bundle.imu))
    return {"sequence_id": bundle.sequence_id, "path": str(path), "imu_samples": len(bundle.imu)}


def generate_synthetic(config: RunConfig, out_dir: Path, workers: int = 1) -> Dict[str, Any]:
    out_dir = Path(out_dir)
    indices = list(range(len(config.synthesis.sequences)))
    results = run_parallel(partial(_generate_one, config=config, out_dir=out_dir), indices, workers)
    return {"sequences": results, "config": config.to_dict()}


# ----------------------------------------------------------------------
# make-labels
# ----------------------------------------------------------------------
def _gt_mean_bias(bundle: SequenceBundle) -> Optional[ImuBias]:
    rows = [s for s in bundle.ground_truth or [] if s.ba is not None and s.bw is not None]
    if not rows:
        return None
    return ImuBias(np.mean([s.ba for s in rows], axis=0), np.mean([s.bw for s in rows], axis=0))


def _pose_states(bundle: SequenceBundle, poses: Path) -> List[Any]:
    path = poses / f"{bundle.sequence_id}.tum" if poses.is_dir() else poses
    trajectory = read_tum(path)
    return states_from_poses(trajectory.stamps, trajectory.positions, trajectory.orientations)


def _label_one(directory: Path, config: RunConfig, out_dir: Path, poses: Optional[Path]) -> Dict[str, Any]:
    bundle = read_euroc_sequence(directory)
    if poses is not None:
        states = _pose_states(bundle, poses)
    elif bundle.ground_truth:
        states = bundle.ground_truth
    else:
        raise DatasetError("sequence has no ground truth; pass --poses", directory)
    result = make_labels(bundle.imu, states, config.labeling, bundle.sequence_id, config.bounds)
    gt_mean = _gt_mean_bias(bundle)
    extra: Dict[str, Any] = {"run_config": config.to_dict()}
    if gt_mean is not None:
        extra["gt_mean_bias"] = gt_mean.to_dict()
    path = write_label(result, out_dir / f"{bundle.sequence_id}.json", extra)
    return {
        "sequence_id": bundle.sequence_id,
        "path": str(path),
        "label": result.bias.to_dict(),
        "converged": result.converged,
        "gt_mean_bias": gt_mean.to_dict() if gt_mean is not None else None,
    }


def make_label_files(
    config: RunConfig,
    data_root: Path,
    out_dir: Path,
    poses: Optional[Path] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    """Label every sequence under ``data_root``; fits label vs gt mean when gt bias is present."""

    out_dir = Path(out_dir)
    task = partial(_label_one, config=config, out_dir=out_dir, poses=Path(poses) if poses else None)
    results = run_parallel(task, discover_sequences(data_root), workers)
    report: Dict[str, Any] = {"sequences": results}
    with_truth = [r for r in results if r["gt_mean_bias"] is not None]
    if len(with_truth) >= 2:
        labels = np.array([ImuBias.from_dict(r["label"]).as_vector() for r in with_truth])
        truths = np.array([ImuBias.from_dict(r["gt_mean_bias"]).as_vector() for r in with_truth])
        report["label_fit"] = dict(zip(("ba_x", "ba_y", "ba_z", "bw_x", "bw_y", "bw_z"), label_fit(labels, truths)))
    write_json(out_dir / "labels_summary.json", report)
    return report


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------
def load_labeled_sequences(
    data_root: Path, label_dir: Path, bounds: Optional[BiasBounds] = None
) -> List[LabeledSequence]:
    out = []
    for directory in discover_sequences(data_root):
        bundle = read_euroc_sequence(directory)
        label = read_label(Path(label_dir) / f"{bundle.sequence_id}.json", bounds)
        stamps = np.array([s.timestamp for s in bundle.imu])
        out.append(LabeledSequence(bundle.sequence_id, imu_matrix(bundle.imu), label.bias, stamps))
    return out


def train_network(config: RunConfig, data_root: Path, label_dir: Path, out_dir: Path) -> Dict[str, Any]:
    """Train on labeled sequences; writes ``weights.bin``, ``train_log.csv`` and a summary."""

    sequences = load_labeled_sequences(data_root, label_dir, config.bounds)
    schedule = config.training.schedule
    schedule = dataclasses.replace(schedule, seed=schedule.seed + config.seed)
    if not schedule.val_ids and len(sequences) > 1:
        held_out = sorted(s.sequence_id for s in sequences)[-1]
        logger.info("No validation ids configured; holding out %s", held_out)
        schedule = dataclasses.replace(schedule, val_ids=[held_out])
    result = train(sequences, config.training.ipnet, schedule)

    out_dir = Path(out_dir)
    weights_path = save_weights(result.weights, out_dir / "weights.bin")
    log_path = write_epoch_log(out_dir / "train_log.csv", result.log)
    summary = {
        "weights": str(weights_path),
        "log": str(log_path),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.log[result.best_epoch].val_loss,
        "parameter_count": result.weights.parameter_count(),
        "schedule": schedule.to_dict(),
        "config": config.to_dict(),
    }
    write_json(out_dir / "train_summary.json", summary)
    return summary


# ----------------------------------------------------------------------
# infer
# ----------------------------------------------------------------------
def _infer_one(
    directory: Path, weights_path: Path, out_dir: Path, bounds: Optional[BiasBounds] = None
) -> Dict[str, Any]:
    weights = load_weights(weights_path)
    bundle = read_euroc_sequence(directory)
    estimates = sliding_inference(bundle.imu, weights, bounds=bounds)
    path = write_prior_csv(out_dir / f"{bundle.sequence_id}.csv", estimates)
    return {"sequence_id": bundle.sequence_id, "path": str(path), "estimates": len(estimates)}


def infer_priors(
    data_root: Path,
    weights_path: Path,
    out_dir: Path,
    workers: int = 1,
    bounds: Optional[BiasBounds] = None,
) -> Dict[str, Any]:
    task = partial(_infer_one, weights_path=Path(weights_path), out_dir=Path(out_dir), bounds=bounds)
    return {"sequences": run_parallel(task, discover_sequences(data_root), workers)}


# ----------------------------------------------------------------------
# fuse
# ----------------------------------------------------------------------
def _read_labels(label_dir: Optional[Path], bounds: Optional[BiasBounds] = None) -> Dict[str, ImuBias]:
    if label_dir is None:
        return {}
    labels = {}
    for path in sorted(Path(label_dir).glob("*.json")):
        if path.name == "labels_summary.json":
            continue
        result = read_label(path, bounds)
        labels[result.sequence_id] = result.bias
    return labels


def fuse_bundle(
    bundle: SequenceBundle,
    config: RunConfig,
    prior_spec: str = "off",
    weights_path: Optional[Path] = None,
    labels: Optional[Dict[str, ImuBias]] = None,
) -> Dict[str, Any]:
    """Fixed-lag run on one sequence with simulated pose observations.

    Returns the :class:`FusionResult` under ``"result"`` and the oracle label
    (when one can be resolved) under ``"label"``.
    """

    if not bundle.ground_truth:
        raise DatasetError("fusion needs ground truth to simulate pose observations", bundle.source or None)
    obs_config = config.fusion.observations
    observations = simulate_observations(
        bundle.ground_truth,
        rate_hz=obs_config.rate_hz,
        position_sigma=obs_config.position_sigma,
        rotation_sigma=obs_config.rotation_sigma,
        dropouts=obs_config.dropouts,
        seed=_sequence_seed(config.seed, bundle.sequence_id),
    )
    source = build_prior_source(prior_spec, weights_path, labels, config.bounds)
    priors = source.estimates(bundle)
    estimator = config.fusion.estimator
    if prior_spec == "off":
        estimator = dataclasses.replace(estimator, prior_enabled=False)

    initial = None
    if obs_config.init_from_truth:
        t0 = bundle.imu[0].timestamp
        gt_t0 = bundle.ground_truth[0].timestamp
        state = interpolate_state(bundle.ground_truth, t0) if t0 >= gt_t0 else bundle.ground_truth[0]
        initial = KeyframeState.from_ground_truth(state)
    result = run_fixed_lag(bundle.imu, observations, priors, estimator, initial)

    label = None
    try:
        label = OraclePrior(labels, bounds=config.bounds).resolve(bundle)
    except DatasetError:
        pass
    return {"result": result, "label": label, "prior_estimates": len(priors)}


def _fuse_one(
    directory: Path,
    config: RunConfig,
    prior_spec: str,
    weights_path: Optional[Path],
    labels: Dict[str, ImuBias],
    out_dir: Path,
) -> Dict[str, Any]:
    bundle = read_euroc_sequence(directory)
    run = fuse_bundle(bundle, config, prior_spec, weights_path, labels)
    result = run["result"]
    tum = write_tum(out_dir / f"{bundle.sequence_id}.tum", Trajectory.from_states(result.trajectory))
    rows = [(rec.state.timestamp, rec.prior, rec.state.bias) for rec in result.keyframes]
    bias_csv = write_bias_csv(out_dir / f"{bundle.sequence_id}_bias.csv", rows, run["label"])
    final = result.keyframes[-1].state.bias
    return {
        "sequence_id": bundle.sequence_id,
        "trajectory": str(tum),
        "bias_estimates": str(bias_csv),
        "keyframes": len(result.keyframes),
        "prior_estimates": run["prior_estimates"],
        "final_bias": final.to_dict(),
    }


def fuse_sequences(
    config: RunConfig,
    data_root: Path,
    out_dir: Path,
    prior_spec: str = "off",
    weights_path: Optional[Path] = None,
    label_dir: Optional[Path] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    out_dir = Path(out_dir)
    task = partial(
        _fuse_one,
        config=config,
        prior_spec=prior_spec,
        weights_path=Path(weights_path) if weights_path else None,
        labels=_read_labels(label_dir, config.bounds),
        out_dir=out_dir,
    )
    summary = {"prior": prior_spec, "sequences": run_parallel(task, discover_sequences(data_root), workers)}
    write_json(out_dir / "fuse_summary.json", {**summary, "config": config.to_dict()})
    return summary


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------
def _evaluate_dir(est_dir: Path, data_root: Path, config: RunConfig) -> Dict[str, Dict[str, Any]]:
    reports: Dict[str, Dict[str, Any]] = {}
    for directory in discover_sequences(data_root):
        bundle = read_euroc_sequence(directory)
        est_path = Path(est_dir) / f"{bundle.sequence_id}.tum"
        if not est_path.exists():
            logger.warning("No trajectory for %s in %s", bundle.sequence_id, est_dir)
            continue
        if not bundle.ground_truth:
            raise DatasetError("sequence has no ground truth to evaluate against", directory)
        reports[bundle.sequence_id] = evaluate(read_tum(est_path), Trajectory.from_states(bundle.ground_truth), config.eval)
    if not reports:
        raise DatasetError("no estimated trajectories matched any sequence", est_dir)
    return reports


def evaluate_runs(
    config: RunConfig,
    est_dir: Path,
    data_root: Path,
    out_path: Path,
    baseline_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """Metric JSON for ``est_dir``; with ``baseline_dir`` also the relative improvement."""

    reports = _evaluate_dir(est_dir, data_root, config)
    document: Dict[str, Any] = {"sequences": reports, "config": config.to_dict()}
    if baseline_dir is not None:
        baseline = _evaluate_dir(baseline_dir, data_root, config)
        document["baseline"] = baseline
        document["comparison"] = compare_reports(baseline, reports, config.eval.divergence_ate)
    write_json(out_path, document)
    return document


# ----------------------------------------------------------------------
# bench-infer
# ----------------------------------------------------------------------
def bench_inference(
    weights: ModelWeights,
    bundle: SequenceBundle,
    repeats: int = 1,
) -> Dict[str, Any]:
    """Windows per second, the equivalent IMU rate and per-window latency percentiles."""

    latencies: List[float] = []
    started = time.perf_counter()
    for _ in range(max(repeats, 1)):
        sliding_inference(bundle.imu, weights, on_window=lambda _i, seconds: latencies.append(seconds))
    elapsed = time.perf_counter() - started
    windows = len(latencies)
    rate = windows / elapsed if elapsed > 0 else float("nan")
    return {
        "windows": windows,
        "windows_per_s": rate,
        "equivalent_sample_rate_hz": rate * weights.config.stride,
        "latency_ms": {k: v * 1e3 for k, v in percentile_summary(latencies).items()},
        "config": weights.config.to_dict(),
    }


def bench_weights(config: RunConfig, weights_path: Optional[Path]) -> ModelWeights:
    if weights_path is not None:
        return load_weights(weights_path)
    return init_weights(config.training.ipnet, config.seed)


__all__ = [
    "bench_inference",
    "bench_weights",
    "discover_sequences",
    "evaluate_runs",
    "fuse_bundle",
    "fuse_sequences",
    "generate_synthetic",
    "infer_priors",
    "load_labeled_sequences",
    "make_label_files",
    "run_parallel",
    "synthesize_bundle",
    "train_network",
]
