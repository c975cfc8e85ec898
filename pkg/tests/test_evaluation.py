"""Association, rigid alignment, ATE/RPE and run comparisons."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from imu_bias_prior.evaluation import (
    AlignmentError,
    EvalConfig,
    Trajectory,
    align_se3,
    associate,
    ate_rmse,
    compare_reports,
    evaluate,
    label_fit,
    rpe_rmse,
)
from imu_bias_prior.fusion import KeyframeState
from imu_bias_prior.geom import UnitQuaternion, quat_from_rotvec, quat_multiply


def helix(count=50):
    t = np.linspace(0.0, 10.0, count)
    positions = np.stack([np.cos(t), np.sin(t), 0.2 * t], axis=1)
    orientations = [quat_from_rotvec((0.0, 0.0, float(x))) for x in t]
    return Trajectory(t, positions, orientations)


def transformed(trajectory, rotvec, translation):
    R = Rotation.from_rotvec(rotvec).as_matrix()
    q = quat_from_rotvec(rotvec)
    return Trajectory(
        trajectory.stamps.copy(),
        trajectory.positions @ R.T + np.asarray(translation),
        [quat_multiply(q, o) for o in trajectory.orientations],
    )


def test_trajectory_sorts_and_validates():
    traj = Trajectory([2.0, 0.0, 1.0], [[2, 2, 2], [0, 0, 0], [1, 1, 1]])
    assert traj.stamps.tolist() == [0.0, 1.0, 2.0]
    assert traj.positions[:, 0].tolist() == [0.0, 1.0, 2.0]
    assert all(o == UnitQuaternion.identity() for o in traj.orientations)
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], [[0, 0, 0]])


def test_trajectory_from_keyframes():
    q = quat_from_rotvec((0.0, 0.1, 0.0))
    states = [KeyframeState(0.5 * k, np.full(3, k), np.zeros(3), q) for k in range(3)]
    traj = Trajectory.from_states(states)
    assert traj.stamps.tolist() == [0.0, 0.5, 1.0]
    assert traj.positions[2].tolist() == [2.0, 2.0, 2.0]
    assert traj.orientations[1] == q


def test_association_is_injective_nearest_first():
    est = Trajectory([0.0, 0.009, 0.5], np.zeros((3, 3)))
    gt = Trajectory([0.01, 0.5005, 2.0], np.zeros((3, 3)))
    assert associate(est, gt, max_gap=0.02) == [(1, 0), (2, 1)]
    assert associate(est, Trajectory([5.0], np.zeros((1, 3)))) == []
    assert associate(Trajectory([], np.zeros((0, 3))), gt) == []


def test_alignment_recovers_rigid_transform():
    gt = helix()
    est = transformed(gt, (0.1, -0.3, 1.2), (4.0, -2.0, 0.5))
    R, t = align_se3(est.positions, gt.positions)
    np.testing.assert_allclose(est.positions @ R.T + t, gt.positions, atol=1e-10)
    assert ate_rmse(est, gt) < 1e-10
    assert rpe_rmse(est, gt) < 1e-10


def test_alignment_rejects_degenerate_input():
    line = np.stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)], axis=1)
    with pytest.raises(AlignmentError):
        align_se3(line, line)
    with pytest.raises(AlignmentError):
        align_se3(line[:2], line[:2])
    with pytest.raises(AlignmentError):
        align_se3(line, line[:4])


def test_ate_bounded_by_zero_mean_noise():
    gt = helix()
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(gt.positions.shape) * 0.01
    noise -= noise.mean(axis=0)
    est = Trajectory(gt.stamps, gt.positions + noise, gt.orientations)
    ate = ate_rmse(est, gt)
    assert 0.0 < ate <= math.sqrt(np.mean(np.sum(noise**2, axis=1))) + 1e-12


def test_rpe_measures_rotation_drift():
    gt = Trajectory(np.arange(5.0), np.zeros((5, 3)), [UnitQuaternion.identity()] * 5)
    drift = [quat_from_rotvec((0.0, 0.0, 0.01 * k)) for k in range(5)]
    est = Trajectory(np.arange(5.0), np.zeros((5, 3)), drift)
    assert rpe_rmse(est, gt) == pytest.approx(0.01, rel=1e-9)
    assert rpe_rmse(est, gt, delta=2) == pytest.approx(0.02, rel=1e-9)
    with pytest.raises(AlignmentError):
        rpe_rmse(est, gt, delta=5)
    with pytest.raises(ValueError):
        rpe_rmse(est, gt, delta=0)


def test_evaluate_report():
    gt = helix()
    report = evaluate(transformed(gt, (0.0, 0.0, 0.5), (1.0, 1.0, 1.0)), gt)
    assert set(report) == {"ate_rmse_m", "rpe_rmse_rad", "n_associated", "alignment", "diverged"}
    assert report["n_associated"] == 50
    assert report["ate_rmse_m"] < 1e-10
    assert not report["diverged"]
    np.testing.assert_allclose(report["alignment"]["translation"], -np.asarray(report["alignment"]["rotation"]) @ [1, 1, 1], atol=1e-9)

    far = Trajectory(gt.stamps, gt.positions * 100.0, gt.orientations)
    assert evaluate(far, gt, EvalConfig(divergence_ate=1.0))["diverged"]
    with pytest.raises(AlignmentError):
        evaluate(Trajectory(gt.stamps + 100.0, gt.positions, gt.orientations), gt)


def test_label_fit_line():
    truths = np.array([[0.01, 1.0], [0.02, 1.0], [0.04, 1.0]])
    labels = np.stack([2.0 * truths[:, 0] + 0.1, [0.5, 0.6, 0.7]], axis=1)
    fit = label_fit(labels, truths)
    assert fit[0]["slope"] == pytest.approx(2.0)
    assert fit[0]["intercept"] == pytest.approx(0.1)
    assert fit[0]["pearson"] == pytest.approx(1.0)
    assert math.isnan(fit[1]["slope"])
    with pytest.raises(ValueError):
        label_fit(labels[:1], truths[:1])


def test_compare_reports_skips_diverged():
    baseline = {
        "a": {"ate_rmse_m": 0.2, "rpe_rmse_rad": 0.01},
        "b": {"ate_rmse_m": 0.1, "rpe_rmse_rad": 0.02},
        "c": {"ate_rmse_m": 0.1, "rpe_rmse_rad": 0.02, "diverged": True},
    }
    candidate = {
        "a": {"ate_rmse_m": 0.1, "rpe_rmse_rad": 0.01},
        "b": {"ate_rmse_m": 0.15, "rpe_rmse_rad": 0.01},
        "c": {"ate_rmse_m": 0.01, "rpe_rmse_rad": 0.01},
        "d": {"ate_rmse_m": 0.01, "rpe_rmse_rad": 0.01},
    }
    result = compare_reports(baseline, candidate)
    assert set(result["sequences"]) == {"a", "b", "c"}
    assert result["sequences"]["a"]["ate_rmse_m_improvement_pct"] == pytest.approx(50.0)
    assert result["sequences"]["b"]["ate_rmse_m_improvement_pct"] == pytest.approx(-50.0)
    assert result["sequences"]["c"]["diverged"]
    assert result["mean_ate_improvement_pct"] == pytest.approx(0.0)
    assert result["mean_rpe_improvement_pct"] == pytest.approx(25.0)

    limited = compare_reports(baseline, candidate, divergence_ate=0.18)
    assert limited["sequences"]["a"]["diverged"]
    assert not limited["sequences"]["b"]["diverged"]
    assert limited["mean_ate_improvement_pct"] == pytest.approx(-50.0)
    assert math.isnan(compare_reports(baseline, candidate, divergence_ate=0.05)["mean_ate_improvement_pct"])


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(rpe_delta=0)
    with pytest.raises(ValueError):
        EvalConfig(max_gap=0.0)
    assert EvalConfig.from_dict(EvalConfig().to_dict()).to_dict() == EvalConfig().to_dict()
