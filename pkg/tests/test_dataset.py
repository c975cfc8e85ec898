"""File formats: EuRoC CSVs, labels, weights container, trajectories and CSV streams."""

from __future__ import annotations

import numpy as np
import pytest

from imu_bias_prior.bias_labeler import LabelResult
from imu_bias_prior.dataset import (
    BIAS_HEADER,
    GT_RELATIVE,
    IMU_RELATIVE,
    DatasetError,
    SequenceBundle,
    directory_checksum,
    load_weights,
    read_epoch_log,
    read_euroc_gt,
    read_euroc_imu,
    read_euroc_sequence,
    read_json,
    read_label,
    read_prior_csv,
    read_tum,
    save_weights,
    write_bias_csv,
    write_epoch_log,
    write_label,
    write_prior_csv,
    write_synthetic_euroc,
    write_tum,
)
from imu_bias_prior.evaluation import Trajectory
from imu_bias_prior.geom import quat_from_rotvec
from imu_bias_prior.imu_model import BiasBounds, ImuBias, NoiseSpec, TrajectorySpec, synthesize_sequence
from imu_bias_prior.ipnet import EpochLog, IpnetConfig, PriorEstimate, init_weights

ORIGIN_NS = 1_403_636_579_758_555_392
IMU_HEADER = "#timestamp [ns],w_x,w_y,w_z,a_x,a_y,a_z\n"


@pytest.fixture
def bundle():
    spec = TrajectorySpec(
        pos_amplitude=(1.0, 0.5, 0.2),
        pos_frequency=(0.2, 0.1, 0.3),
        att_amplitude=(0.1, 0.2, 0.3),
        att_frequency=(0.1, 0.2, 0.1),
        duration=0.5,
    )
    bias = ImuBias((0.05, -0.02, 0.03), (0.002, -0.001, 0.0015))
    seq = synthesize_sequence(spec, bias, NoiseSpec(accel_noise_std=0.01, rng_seed=1))
    return SequenceBundle(
        "synthetic",
        seq.samples,
        seq.ground_truth,
        origin_ns=ORIGIN_NS,
        truth={"ba": bias.ba.tolist(), "bw": bias.bw.tolist()},
    )


def write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def sample_label(**overrides):
    values = dict(
        sequence_id="seq00",
        ba_mean=np.array([0.1, -0.2, 1.0 / 3.0]),
        bw_mean=np.array([1e-3, 2e-3, -7e-4]),
        rms_before={"alpha": 0.5, "beta": 0.25, "gamma": 0.01},
        rms_after={"alpha": 1e-4, "beta": 2e-4, "gamma": 1e-6},
        iterations=90000,
        converged=True,
        interval_count=10,
        config={"interval_s": 1.0},
    )
    values.update(overrides)
    return LabelResult(**values)


# ----------------------------------------------------------------------
# EuRoC CSV
# ----------------------------------------------------------------------
def test_synthetic_sequence_round_trip(tmp_path, bundle):
    root = write_synthetic_euroc(bundle, tmp_path / "seq")
    loaded = read_euroc_sequence(root)
    assert loaded.sequence_id == "seq"
    assert loaded.origin_ns == ORIGIN_NS
    assert len(loaded.imu) == len(bundle.imu)
    for got, want in zip(loaded.imu, bundle.imu):
        assert got.timestamp == pytest.approx(want.timestamp, abs=1e-9)
        assert got.gyro.tolist() == want.gyro.tolist()
        assert got.accel.tolist() == want.accel.tolist()
    assert len(loaded.ground_truth) == len(bundle.ground_truth)
    last, truth = loaded.ground_truth[-1], bundle.ground_truth[-1]
    assert last.position.tolist() == truth.position.tolist()
    np.testing.assert_allclose(last.orientation.as_array(), truth.orientation.as_array(), atol=1e-15)
    assert last.ba.tolist() == truth.ba.tolist()
    assert loaded.truth == bundle.truth


def test_imu_reader_skips_headers_and_blank_lines(tmp_path):
    path = write_text(
        tmp_path / "imu.csv",
        IMU_HEADER + "\n1000000000,0.1,0.2,0.3,0,0,9.81\n# note\n1005000000,0.1,0.2,0.3,0,0,9.81\n",
    )
    samples = read_euroc_imu(path, origin_ns=1_000_000_000)
    assert [s.timestamp for s in samples] == [0.0, 0.005]
    assert samples[0].accel.tolist() == [0.0, 0.0, 9.81]


def test_imu_reader_reports_path_and_line(tmp_path):
    path = write_text(tmp_path / "imu.csv", IMU_HEADER + "0,0,0,0,0,0,0\n5,0,0,0,0,0\n")
    with pytest.raises(DatasetError) as info:
        read_euroc_imu(path)
    assert info.value.line == 3
    assert f"{path}:3:" in str(info.value)


@pytest.mark.parametrize(
    "rows",
    [
        "0,0,0,0,0,0,0\n0,0,0,0,0,0,0\n",
        "5,0,0,0,0,0,0\n3,0,0,0,0,0,0\n",
        "0,0,0,nan,0,0,0\n",
        "0,0,0,x,0,0,0\n",
    ],
)
def test_imu_reader_rejects_bad_rows(tmp_path, rows):
    path = write_text(tmp_path / "imu.csv", IMU_HEADER + rows)
    with pytest.raises(DatasetError):
        read_euroc_imu(path)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_euroc_imu(tmp_path / "absent.csv")
    with pytest.raises(FileNotFoundError):
        read_euroc_sequence(tmp_path)


def test_ground_truth_quaternion_repair(tmp_path):
    slightly_off = "0,1,2,3,1.0004,0,0,0,0.1,0.2,0.3\n"
    path = write_text(tmp_path / "gt.csv", "#timestamp,p,q,v\n" + slightly_off)
    (state,) = read_euroc_gt(path)
    assert state.orientation.as_array().tolist() == [1.0, 0.0, 0.0, 0.0]
    assert state.velocity.tolist() == [0.1, 0.2, 0.3]
    assert state.ba is None and state.bw is None

    far_off = "0,1,2,3,1.1,0,0,0,0.1,0.2,0.3\n"
    path = write_text(tmp_path / "bad.csv", far_off)
    with pytest.raises(DatasetError) as info:
        read_euroc_gt(path)
    assert info.value.line == 1


def test_sequence_without_ground_truth(tmp_path):
    write_text(tmp_path / "run" / IMU_RELATIVE, IMU_HEADER + "10,0,0,0,0,0,9.81\n20,0,0,0,0,0,9.81\n")
    loaded = read_euroc_sequence(tmp_path / "run", sequence_id="custom")
    assert loaded.sequence_id == "custom"
    assert loaded.ground_truth is None
    assert loaded.imu[0].timestamp == 0.0
    assert not (tmp_path / "run" / GT_RELATIVE).exists()


# ----------------------------------------------------------------------
# JSON and labels
# ----------------------------------------------------------------------
def test_label_round_trip_is_exact(tmp_path):
    label = sample_label()
    path = write_label(label, tmp_path / "labels" / "seq00.json", extra={"truth": {"ba": [0.0, 0.0, 0.0]}})
    loaded = read_label(path)
    assert loaded.ba_mean.tolist() == label.ba_mean.tolist()
    assert loaded.bw_mean.tolist() == label.bw_mean.tolist()
    assert loaded.rms_after == label.rms_after
    assert loaded.iterations == 90000 and loaded.converged
    raw = read_json(path)
    assert len(raw["config_hash"]) == 64
    assert raw["truth"] == {"ba": [0.0, 0.0, 0.0]}


def test_label_outside_bounds_rejected(tmp_path):
    path = write_label(sample_label(ba_mean=np.array([3.0, 0.0, 0.0])), tmp_path / "seq00.json")
    with pytest.raises(DatasetError) as info:
        read_label(path)
    assert "exceeds bound" in str(info.value)
    assert read_label(path, BiasBounds(max_ba=5.0)).ba_mean.tolist() == [3.0, 0.0, 0.0]


def test_label_missing_keys(tmp_path):
    path = write_text(tmp_path / "label.json", '{"sequence_id": "x", "ba_mean": [0, 0, 0]}')
    with pytest.raises(DatasetError) as info:
        read_label(path)
    assert "bw_mean" in str(info.value)


def test_invalid_json_reports_line(tmp_path):
    path = write_text(tmp_path / "broken.json", '{\n  "a": 1,\n  oops\n}')
    with pytest.raises(DatasetError) as info:
        read_json(path)
    assert info.value.line == 3


# ----------------------------------------------------------------------
# Weights container
# ----------------------------------------------------------------------
def test_weights_round_trip(tmp_path):
    weights = init_weights(IpnetConfig.tiny(), seed=5)
    weights.buffers["input.mean"][:] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    path = save_weights(weights, tmp_path / "model.bin")
    loaded = load_weights(path, expected_config=IpnetConfig.tiny())
    assert list(loaded.params) == list(weights.params)
    for name, tensor in weights.params.items():
        assert loaded.params[name].data.tobytes() == tensor.data.tobytes()
        assert loaded.params[name].requires_grad
    assert loaded.buffers["input.mean"].tolist() == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]


def test_weights_checksum_and_config_checks(tmp_path):
    path = save_weights(init_weights(IpnetConfig.tiny(), seed=5), tmp_path / "model.bin")
    with pytest.raises(DatasetError):
        load_weights(path, expected_config=IpnetConfig())

    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    corrupted = tmp_path / "corrupted.bin"
    corrupted.write_bytes(bytes(blob))
    with pytest.raises(DatasetError) as info:
        load_weights(corrupted)
    assert "checksum" in str(info.value)

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(b"\x01\x02")
    with pytest.raises(DatasetError):
        load_weights(truncated)
    with pytest.raises(FileNotFoundError):
        load_weights(tmp_path / "absent.bin")


# ----------------------------------------------------------------------
# Trajectories and CSV streams
# ----------------------------------------------------------------------
def test_tum_round_trip(tmp_path):
    orientations = [quat_from_rotvec((0.0, 0.0, 0.1 * k)) for k in range(3)]
    trajectory = Trajectory(np.array([0.0, 0.5, 1.0]), np.arange(9.0).reshape(3, 3) / 7.0, orientations)
    loaded = read_tum(write_tum(tmp_path / "est.txt", trajectory))
    assert loaded.stamps.tolist() == [0.0, 0.5, 1.0]
    assert loaded.positions.tolist() == trajectory.positions.tolist()
    np.testing.assert_allclose(loaded.orientations[2].as_array(), orientations[2].as_array(), atol=1e-15)


def test_tum_rejects_short_lines(tmp_path):
    path = write_text(tmp_path / "est.txt", "# t x y z qx qy qz qw\n0.0 1 2 3 0 0 0\n")
    with pytest.raises(DatasetError) as info:
        read_tum(path)
    assert info.value.line == 2


def test_prior_csv_round_trip(tmp_path):
    estimates = [
        PriorEstimate(0.0, ImuBias.zero(), warmup=True),
        PriorEstimate(0.32, ImuBias((0.1, 0.2, 0.3), (1e-3, 2e-3, 3e-3))),
    ]
    loaded = read_prior_csv(write_prior_csv(tmp_path / "prior.csv", estimates))
    assert [e.warmup for e in loaded] == [True, False]
    assert loaded[1].timestamp == 0.32
    assert loaded[1].bias.as_vector().tolist() == estimates[1].bias.as_vector().tolist()


def test_prior_csv_rejects_implausible_row(tmp_path):
    estimates = [
        PriorEstimate(0.0, ImuBias.zero(), warmup=True),
        PriorEstimate(0.5, ImuBias((0.0, 0.0, 0.0), (0.0, 0.6, 0.0))),
    ]
    path = write_prior_csv(tmp_path / "prior.csv", estimates)
    with pytest.raises(DatasetError) as info:
        read_prior_csv(path)
    assert info.value.line == 3
    assert len(read_prior_csv(path, BiasBounds(max_bw=1.0))) == 2


def test_prior_csv_header_checked(tmp_path):
    path = write_text(tmp_path / "prior.csv", "t,a,b\n0,0,0\n")
    with pytest.raises(DatasetError):
        read_prior_csv(path)


def test_bias_csv_marks_missing_prior(tmp_path):
    est = ImuBias((0.1, 0.0, 0.0), (0.0, 0.0, 0.0))
    path = write_bias_csv(tmp_path / "bias.csv", [(0.0, None, est), (0.5, est, est)], label=est)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",") == BIAS_HEADER
    first = lines[1].split(",")
    assert first[1:7] == ["nan"] * 6
    assert float(first[7]) == 0.1
    assert len(lines) == 3


def test_epoch_log_round_trip(tmp_path):
    log = [EpochLog(0, 1e-6, 0.5, 0.6), EpochLog(1, 1e-6, 0.4, 0.55)]
    assert read_epoch_log(write_epoch_log(tmp_path / "log.csv", log)) == log


def test_directory_checksum_tracks_content(tmp_path):
    write_text(tmp_path / "a" / "x.txt", "one")
    write_text(tmp_path / "b" / "x.txt", "one")
    assert directory_checksum(tmp_path / "a") == directory_checksum(tmp_path / "b")
    write_text(tmp_path / "b" / "x.txt", "two")
    assert directory_checksum(tmp_path / "a") != directory_checksum(tmp_path / "b")
