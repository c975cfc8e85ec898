"""File I/O: EuRoC-layout CSVs, label JSON, weights containers and trajectory text."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bias_labeler import LabelResult
from .evaluation import Trajectory
from .geom import GeometryError, UnitQuaternion
from .imu_model import BiasBounds, GroundTruthState, ImuBias, ImuModelError, ImuSample
from .ipnet import EpochLog, IpnetConfig, ModelWeights, PriorEstimate
from .autodiff import Tensor
from .utils import canonical_json, config_hash, format_float, to_jsonable

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

NS_PER_S = 1_000_000_000
IMU_COLUMNS = 7
GT_COLUMNS_POSE_VEL = 11
GT_COLUMNS_FULL = 17
QUATERNION_REPAIR_LIMIT = 1e-3
WEIGHTS_FORMAT = "ipnet-weights"
WEIGHTS_VERSION = 1
IMU_RELATIVE = Path("mav0") / "imu0" / "data.csv"
GT_RELATIVE = Path("mav0") / "state_groundtruth_estimate0" / "data.csv"
TRUTH_SIDECAR = "truth.json"


class DatasetError(ValueError):
    """Raised for unreadable or schema-invalid files; carries the path and line."""

    def __init__(self, message: str, path: Optional[PathLike] = None, line: Optional[int] = None) -> None:
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = str(path) if path is not None else None
        self.line = line


@dataclass(slots=True, eq=False)
class SequenceBundle:
    """One sequence in SI units with time relative to ``origin_ns``."""

    sequence_id: str
    imu: List[ImuSample]
    ground_truth: Optional[List[GroundTruthState]] = None
    source: str = ""
    origin_ns: int = 0
    truth: Dict[str, Any] = field(default_factory=dict)


# ----------------------------------------------------------------------
# EuRoC CSV
# ----------------------------------------------------------------------
def _ns_to_seconds(ns: int, origin_ns: int) -> float:
    whole, frac = divmod(ns - origin_ns, NS_PER_S)
    return float(whole) + frac / NS_PER_S


def _seconds_to_ns(t: float, origin_ns: int) -> int:
    return origin_ns + int(round(t * NS_PER_S))


def _rows(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Non-empty data rows with 1-based line numbers; ``#`` headers skipped."""

    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#"):
                continue
            if line_no == 1 and not row[0].strip().lstrip("-").isdigit():
                continue
            yield line_no, [cell.strip() for cell in row]


def _parse_row(path: Path, line_no: int, row: List[str], widths: Sequence[int]) -> Tuple[int, np.ndarray]:
    if len(row) not in widths:
        expected = " or ".join(str(w) for w in widths)
        raise DatasetError(f"expected {expected} columns, got {len(row)}", path, line_no)
    try:
        stamp = int(row[0])
        values = np.array([float(cell) for cell in row[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"malformed row: {exc}", path, line_no) from exc
    if not np.all(np.isfinite(values)):
        raise DatasetError("non-finite value", path, line_no)
    return stamp, values


def _check_monotone(path: Path, stamps: Sequence[int], lines: Sequence[int]) -> None:
    for k in range(1, len(stamps)):
        if stamps[k] <= stamps[k - 1]:
            raise DatasetError(
                f"timestamps not strictly increasing ({stamps[k - 1]} then {stamps[k]})", path, lines[k]
            )


def first_timestamp_ns(path: PathLike) -> Optional[int]:
    for line_no, row in _rows(Path(path)):
        try:
            return int(row[0])
        except ValueError as exc:
            raise DatasetError(f"malformed timestamp: {exc}", path, line_no) from exc
    return None


def read_euroc_imu(path: PathLike, origin_ns: int = 0) -> List[ImuSample]:
    """IMU rows ``timestamp[ns], w_xyz[rad/s], a_xyz[m/s^2]`` in file order."""

    path = Path(path)
    stamps: List[int] = []
    lines: List[int] = []
    samples: List[ImuSample] = []
    for line_no, row in _rows(path):
        stamp, values = _parse_row(path, line_no, row, (IMU_COLUMNS,))
        stamps.append(stamp)
        lines.append(line_no)
        samples.append(ImuSample(_ns_to_seconds(stamp, origin_ns), values[0:3], values[3:6]))
    _check_monotone(path, stamps, lines)
    if not samples:
        logger.warning("IMU file %s has no data rows", path)
    else:
        logger.debug("Read %d IMU rows from %s", len(samples), path)
    return samples


def read_euroc_gt(path: PathLike, origin_ns: int = 0) -> List[GroundTruthState]:
    """Ground-truth rows ``timestamp, p(3), q(w,x,y,z), v(3)[, bw(3), ba(3)]``."""

    path = Path(path)
    stamps: List[int] = []
    lines: List[int] = []
    states: List[GroundTruthState] = []
    for line_no, row in _rows(path):
        stamp, values = _parse_row(path, line_no, row, (GT_COLUMNS_POSE_VEL, GT_COLUMNS_FULL))
        quat = values[3:7]
        norm = float(np.linalg.norm(quat))
        if abs(norm - 1.0) > QUATERNION_REPAIR_LIMIT:
            raise DatasetError(f"quaternion norm {norm:.6f} is not unit", path, line_no)
        if abs(norm - 1.0) > 1e-12:
            logger.debug("Renormalized quaternion on %s:%d (norm %.9f)", path, line_no, norm)
        try:
            orientation = UnitQuaternion.normalized(*quat)
        except GeometryError as exc:
            raise DatasetError(str(exc), path, line_no) from exc
        has_bias = len(values) == GT_COLUMNS_FULL - 1
        stamps.append(stamp)
        lines.append(line_no)
        states.append(
            GroundTruthState(
                timestamp=_ns_to_seconds(stamp, origin_ns),
                position=values[0:3].copy(),
                velocity=values[7:10].copy(),
                orientation=orientation,
                bw=values[10:13].copy() if has_bias else None,
                ba=values[13:16].copy() if has_bias else None,
            )
        )
    _check_monotone(path, stamps, lines)
    if not states:
        logger.warning("Ground-truth file %s has no data rows", path)
    return states


def read_euroc_sequence(directory: PathLike, sequence_id: Optional[str] = None) -> SequenceBundle:
    """Read ``mav0/imu0`` and (if present) ``mav0/state_groundtruth_estimate0``.

    Time is re-based on the first IMU timestamp.
    """

    root = Path(directory)
    imu_path = root / IMU_RELATIVE
    origin = first_timestamp_ns(imu_path) or 0
    imu = read_euroc_imu(imu_path, origin)
    gt_path = root / GT_RELATIVE
    gt = read_euroc_gt(gt_path, origin) if gt_path.exists() else None
    truth: Dict[str, Any] = {}
    if (root / TRUTH_SIDECAR).exists():
        truth = read_json(root / TRUTH_SIDECAR)
    return SequenceBundle(
        sequence_id=sequence_id or root.name,
        imu=imu,
        ground_truth=gt,
        source=str(root),
        origin_ns=origin,
        truth=truth,
    )


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_synthetic_euroc(bundle: SequenceBundle, directory: PathLike) -> Path:
    """Write ``bundle`` in the EuRoC layout plus an optional truth sidecar."""

    root = Path(directory)
    imu_rows = [
        [str(_seconds_to_ns(s.timestamp, bundle.origin_ns))] + [format_float(x) for x in (*s.gyro, *s.accel)]
        for s in bundle.imu
    ]
    _write_csv(
        root / IMU_RELATIVE,
        ["#timestamp [ns]", "w_RS_S_x [rad s^-1]", "w_RS_S_y [rad s^-1]", "w_RS_S_z [rad s^-1]",
         "a_RS_S_x [m s^-2]", "a_RS_S_y [m s^-2]", "a_RS_S_z [m s^-2]"],
        imu_rows,
    )
    if bundle.ground_truth:
        gt_rows = []
        for st in bundle.ground_truth:
            bw = st.bw if st.bw is not None else np.zeros(3)
            ba = st.ba if st.ba is not None else np.zeros(3)
            values = (*st.position, *st.orientation.as_array(), *st.velocity, *bw, *ba)
            gt_rows.append([str(_seconds_to_ns(st.timestamp, bundle.origin_ns))] + [format_float(x) for x in values])
        _write_csv(
            root / GT_RELATIVE,
            ["#timestamp", "p_x [m]", "p_y [m]", "p_z [m]", "q_w []", "q_x []", "q_y []", "q_z []",
             "v_x [m s^-1]", "v_y [m s^-1]", "v_z [m s^-1]", "b_w_x [rad s^-1]", "b_w_y [rad s^-1]",
             "b_w_z [rad s^-1]", "b_a_x [m s^-2]", "b_a_y [m s^-2]", "b_a_z [m s^-2]"],
            gt_rows,
        )
    if bundle.truth:
        write_json(root / TRUTH_SIDECAR, bundle.truth)
    return root


# ----------------------------------------------------------------------
# JSON artifacts
# ----------------------------------------------------------------------
def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc


LABEL_KEYS = ("sequence_id", "ba_mean", "bw_mean", "rms_before", "rms_after", "iterations", "converged")


def write_label(result: LabelResult, path: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Label JSON; floats use the shortest repr that parses back to the same double."""

    payload = {
        "sequence_id": result.sequence_id,
        "ba_mean": result.ba_mean.tolist(),
        "bw_mean": result.bw_mean.tolist(),
        "rms_before": result.rms_before,
        "rms_after": result.rms_after,
        "iterations": result.iterations,
        "converged": result.converged,
        "interval_count": result.interval_count,
        "config": result.config,
        "config_hash": config_hash(result.config),
    }
    if extra:
        payload.update(extra)
    return write_json(path, payload)


def read_label(path: PathLike, bounds: Optional[BiasBounds] = None) -> LabelResult:
    """Load a label file; a bias outside ``bounds`` raises :class:`DatasetError`."""

    data = read_json(path)
    if not isinstance(data, dict):
        raise DatasetError("label file must contain a JSON object", path)
    missing = [key for key in LABEL_KEYS if key not in data]
    if missing:
        raise DatasetError(f"label file missing keys: {', '.join(missing)}", path)
    try:
        bias = (bounds or BiasBounds()).check(ImuBias(data["ba_mean"], data["bw_mean"]))
    except ImuModelError as exc:
        raise DatasetError(f"invalid bias: {exc}", path) from exc
    return LabelResult(
        sequence_id=str(data["sequence_id"]),
        ba_mean=bias.ba,
        bw_mean=bias.bw,
        rms_before=dict(data["rms_before"]),
        rms_after=dict(data["rms_after"]),
        iterations=int(data["iterations"]),
        converged=bool(data["converged"]),
        interval_count=int(data.get("interval_count", 0)),
        config=dict(data.get("config", {})),
    )


# ----------------------------------------------------------------------
# Weights container
# ----------------------------------------------------------------------
def _weights_checksum(header: Dict[str, Any], payload: bytes) -> str:
    digest = hashlib.sha256(canonical_json(header).encode("utf-8"))
    digest.update(payload)
    return digest.hexdigest()


def save_weights(weights: ModelWeights, path: PathLike) -> Path:
    """Write ``uint64 header length | JSON header | little-endian float64 payload``."""

    path = Path(path)
    tensors = []
    chunks = []
    offset = 0
    param_names = set(weights.params)
    for name, array in weights.named_arrays():
        arr = np.ascontiguousarray(array, dtype="<f8")
        tensors.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "kind": "param" if name in param_names else "buffer"}
        )
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header: Dict[str, Any] = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "config": weights.config.to_dict(),
        "tensors": tensors,
        "normalization": {
            "mean": weights.buffers["input.mean"].tolist(),
            "std": weights.buffers["input.std"].tolist(),
        },
    }
    header["checksum"] = _weights_checksum(header, payload)
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(struct.pack("<Q", len(encoded)) + encoded + payload)
    return path


def load_weights(path: PathLike, expected_config: Optional[IpnetConfig] = None) -> ModelWeights:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Weights file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8:
        raise DatasetError("truncated weights file", path)
    (length,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable weights header: {exc}", path) from exc
    if header.get("format") != WEIGHTS_FORMAT or header.get("version") != WEIGHTS_VERSION:
        raise DatasetError("not an ipnet weights file", path)
    payload = blob[8 + length :]
    recorded = header.pop("checksum", None)
    if recorded != _weights_checksum(header, payload):
        raise DatasetError("checksum mismatch", path)

    config = IpnetConfig.from_dict(header["config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise DatasetError("weights were saved for a different network config", path)
    values = np.frombuffer(payload, dtype="<f8")
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = int(entry["offset"])
        if start + size > values.size:
            raise DatasetError(f"tensor {entry['name']} exceeds payload", path)
        array = values[start : start + size].astype(np.float64).reshape(entry["shape"])
        if entry["kind"] == "param":
            params[entry["name"]] = Tensor(array, requires_grad=True, name=entry["name"])
        else:
            buffers[entry["name"]] = array
    return ModelWeights(config=config, params=params, buffers=buffers)


# ----------------------------------------------------------------------
# Trajectories and CSV streams
# ----------------------------------------------------------------------
def write_tum(path: PathLike, trajectory: Trajectory) -> Path:
    """``timestamp tx ty tz qx qy qz qw`` per line."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for t, p, q in zip(trajectory.stamps, trajectory.positions, trajectory.orientations):
        fields = [f"{t:.9f}"] + [format_float(x) for x in (*p, q.x, q.y, q.z, q.w)]
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_tum(path: PathLike) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trajectory file not found: {path}")
    stamps, positions, orientations = [], [], []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 8:
            raise DatasetError(f"expected 8 fields, got {len(parts)}", path, line_no)
        try:
            t, px, py, pz, qx, qy, qz, qw = (float(x) for x in parts)
            orientations.append(UnitQuaternion.normalized(qw, qx, qy, qz))
        except (ValueError, GeometryError) as exc:
            raise DatasetError(f"malformed pose: {exc}", path, line_no) from exc
        stamps.append(t)
        positions.append((px, py, pz))
    return Trajectory(np.array(stamps), np.array(positions, dtype=np.float64).reshape(-1, 3), orientations)


PRIOR_HEADER = ["timestamp", "ba_x", "ba_y", "ba_z", "bw_x", "bw_y", "bw_z", "warmup"]


def write_prior_csv(path: PathLike, estimates: Sequence[PriorEstimate]) -> Path:
    rows = [
        [format_float(e.timestamp)] + [format_float(x) for x in e.bias.as_vector()] + [str(int(e.warmup))]
        for e in estimates
    ]
    path = Path(path)
    _write_csv(path, PRIOR_HEADER, rows)
    return path


def read_prior_csv(path: PathLike, bounds: Optional[BiasBounds] = None) -> List[PriorEstimate]:
    path = Path(path)
    bounds = bounds or BiasBounds()
    if not path.exists():
        raise FileNotFoundError(f"Prior file not found: {path}")
    out: List[PriorEstimate] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:7]] != PRIOR_HEADER[:7]:
            raise DatasetError("prior CSV header must start with " + ",".join(PRIOR_HEADER[:7]), path, 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values = [float(x) for x in row[:7]]
                warmup = bool(int(row[7])) if len(row) > 7 else False
                bias = bounds.check(ImuBias.from_vector(values[1:7]))
            except (ValueError, IndexError, ImuModelError) as exc:
                raise DatasetError(f"malformed prior row: {exc}", path, line_no) from exc
            out.append(PriorEstimate(values[0], bias, warmup))
    return out


BIAS_HEADER = (
    ["timestamp"]
    + [f"prior_{b}_{a}" for b in ("ba", "bw") for a in "xyz"]
    + [f"est_{b}_{a}" for b in ("ba", "bw") for a in "xyz"]
    + [f"label_{b}_{a}" for b in ("ba", "bw") for a in "xyz"]
)


def write_bias_csv(
    path: PathLike,
    rows: Sequence[Tuple[float, Optional[ImuBias], ImuBias]],
    label: Optional[ImuBias] = None,
) -> Path:
    """Per-keyframe ``(timestamp, prior target, optimized bias)`` with the label; missing values are ``nan``."""

    def cells(bias: Optional[ImuBias]) -> List[str]:
        if bias is None:
            return ["nan"] * 6
        return [format_float(x) for x in bias.as_vector()]

    out = [[format_float(t)] + cells(prior) + cells(est) + cells(label) for t, prior, est in rows]
    path = Path(path)
    _write_csv(path, BIAS_HEADER, out)
    return path


def write_epoch_log(path: PathLike, log: Sequence[EpochLog]) -> Path:
    path = Path(path)
    rows = [[str(e.epoch), format_float(e.lr), format_float(e.train_loss), format_float(e.val_loss)] for e in log]
    _write_csv(path, ["epoch", "lr", "train_loss", "val_loss"], rows)
    return path


def read_epoch_log(path: PathLike) -> List[EpochLog]:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        try:
            return [
                EpochLog(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["val_loss"]))
                for r in reader
            ]
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"malformed epoch log: {exc}", path) from exc


def directory_checksum(directory: PathLike) -> str:
    """SHA-256 over relative paths and contents of every file below ``directory``."""

    root = Path(directory)
    digest = hashlib.sha256()
    for file in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(file.relative_to(root).as_posix().encode("utf-8"))
        digest.update(file.read_bytes())
    return digest.hexdigest()


__all__ = [
    "BIAS_HEADER",
    "DatasetError",
    "SequenceBundle",
    "directory_checksum",
    "first_timestamp_ns",
    "load_weights",
    "read_epoch_log",
    "read_euroc_gt",
    "read_euroc_imu",
    "read_euroc_sequence",
    "read_json",
    "read_label",
    "read_prior_csv",
    "read_tum",
    "save_weights",
    "write_bias_csv",
    "write_epoch_log",
    "write_json",
    "write_label",
    "write_prior_csv",
    "write_synthetic_euroc",
    "write_tum",
]
