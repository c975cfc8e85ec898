"""Factor, solver and fixed-lag estimator tests."""

from __future__ import annotations

import numpy as np
import pytest

from imu_bias_prior.config import DEFAULT_TRAJECTORY
from imu_bias_prior.fusion import (
    BiasPriorFactor,
    FusionConfig,
    FusionError,
    ImuFactor,
    KeyframeState,
    LmOptions,
    PoseFactor,
    PoseObservation,
    WindowGraph,
    _build_graph,
    _Slot,
    graph_cost,
    imu_factor_residual,
    optimize_window,
    pose_obs_residual,
    prior_residual_and_jacobian,
    propagate,
    run_fixed_lag,
    simulate_observations,
)
from imu_bias_prior.geom import quat_from_rotvec, quat_log, quat_multiply
from imu_bias_prior.imu_model import GravityConfig, ImuBias, ImuSample, NoiseSpec, TrajectorySpec, synthesize_sequence
from imu_bias_prior.ipnet import IpnetConfig, PriorEstimate, init_weights, sliding_inference
from imu_bias_prior.preintegration import integrate

TRUE_BIAS = ImuBias((0.05, -0.02, 0.03), (0.002, -0.001, 0.0015))
GRAVITY = GravityConfig()


def trajectory(duration):
    return TrajectorySpec.from_dict({**DEFAULT_TRAJECTORY, "duration": duration})


@pytest.fixture(scope="module")
def clean_sequence():
    return synthesize_sequence(trajectory(6.0), TRUE_BIAS, NoiseSpec())


def exact_chain(sequence, count=5, step=100, bias=TRUE_BIAS):
    """Keyframes propagated through their own preintegration, so every IMU residual is zero."""

    states = [KeyframeState.from_ground_truth(sequence.ground_truth[0], bias)]
    preints = []
    for k in range(count - 1):
        preint = integrate(sequence.samples[k * step : (k + 1) * step + 1], bias)
        preints.append(preint)
        states.append(propagate(states[-1], preint, GRAVITY))
    return states, preints


def numeric_jacobian(fn, state, h=1e-6):
    columns = []
    for i in range(15):
        step = np.zeros(15)
        step[i] = h
        columns.append((fn(state.retract(step)) - fn(state.retract(-step))) / (2 * h))
    return np.stack(columns, axis=1)


def perturbed(state, rng, pose=True):
    delta = rng.standard_normal(15) * np.array([0.05] * 3 + [0.05] * 3 + [0.02] * 3 + [0.01] * 3 + [0.001] * 3)
    if not pose:
        delta[:3] = 0.0
        delta[6:9] = 0.0
    return state.retract(delta)


def chain_graph(states, preints, config, pose_states=None):
    pose_states = pose_states or states
    graph = WindowGraph(keyframes=list(states), gravity=GRAVITY)
    for k, preint in enumerate(preints):
        graph.imu_factors.append(ImuFactor(k, k + 1, preint, config.imu_sqrt_info(preint.dt_total)))
    for k, s in enumerate(pose_states):
        graph.pose_factors.append(PoseFactor(k, PoseObservation(s.timestamp, s.p.copy(), s.q), config.observation_info()))
    return graph


def position_rmse(result, sequence):
    truth = {s.timestamp: s.position for s in sequence.ground_truth}
    errors = [kf.p - truth[kf.timestamp] for kf in result.trajectory]
    return float(np.sqrt(np.mean(np.sum(np.square(errors), axis=1))))


# ----------------------------------------------------------------------
# Bias prior factor
# ----------------------------------------------------------------------
def test_prior_residual_zero_at_target():
    state = KeyframeState(0.0, np.zeros(3), np.zeros(3), quat_from_rotvec((0, 0, 0)), TRUE_BIAS)
    r, J = prior_residual_and_jacobian(state, BiasPriorFactor(TRUE_BIAS, np.eye(6), 0))
    assert r.tolist() == [0.0] * 6
    np.testing.assert_array_equal(J, np.eye(6))


def test_prior_residual_offset_and_scaling():
    state = KeyframeState(0.0, np.zeros(3), np.zeros(3), quat_from_rotvec((0, 0, 0)), ImuBias((0.01, 0, 0), (0, 0, 0)))
    r, _ = prior_residual_and_jacobian(state, BiasPriorFactor(ImuBias.zero(), np.eye(6), 0))
    np.testing.assert_allclose(r, [0.01, 0, 0, 0, 0, 0])

    W = FusionConfig().prior_weight()
    target = ImuBias((0.02, 0.01, -0.01), (0.001, 0.0, 0.002))
    r1, J1 = prior_residual_and_jacobian(state, BiasPriorFactor(target, W, 0))
    r2, J2 = prior_residual_and_jacobian(state, BiasPriorFactor(target, 2 * W, 0))
    np.testing.assert_array_equal(r2, 2 * r1)
    np.testing.assert_array_equal(J2, 2 * J1)
    np.testing.assert_array_equal(J1, W)


def test_prior_weight_validation():
    with pytest.raises(FusionError):
        BiasPriorFactor(TRUE_BIAS, np.eye(5), 0)
    asym = np.eye(6)
    asym[0, 1] = 0.5
    with pytest.raises(FusionError):
        BiasPriorFactor(TRUE_BIAS, asym, 0)
    with pytest.raises(FusionError):
        BiasPriorFactor(TRUE_BIAS, -np.eye(6), 0)


@pytest.mark.parametrize("scale", [1.0, 2.0])
def test_prior_only_graph_converges_to_target(scale):
    state = KeyframeState(0.0, np.ones(3), np.zeros(3), quat_from_rotvec((0.1, 0, 0)))
    graph = WindowGraph(keyframes=[state])
    graph.prior_factors.append(BiasPriorFactor(TRUE_BIAS, scale * FusionConfig().prior_weight(), 0))
    solution = optimize_window(graph, LmOptions(max_iterations=2))
    assert solution.iterations <= 2
    assert solution.keyframes[0].bias.allclose(TRUE_BIAS, atol=1e-9)
    np.testing.assert_array_equal(solution.keyframes[0].p, state.p)


# ----------------------------------------------------------------------
# IMU and pose factors
# ----------------------------------------------------------------------
def test_imu_residual_vanishes_on_propagated_states(clean_sequence):
    states, preints = exact_chain(clean_sequence)
    for k, preint in enumerate(preints):
        r, _, _ = imu_factor_residual(states[k], states[k + 1], preint, GRAVITY)
        assert np.max(np.abs(r)) < 1e-8


def test_imu_residual_vanishes_with_bias_away_from_linearization(clean_sequence):
    state = KeyframeState.from_ground_truth(clean_sequence.ground_truth[0], TRUE_BIAS)
    preint = integrate(clean_sequence.samples[:101])
    r, _, _ = imu_factor_residual(state, propagate(state, preint, GRAVITY), preint, GRAVITY)
    assert np.max(np.abs(r)) < 1e-8


def test_imu_factor_jacobians_match_finite_differences(clean_sequence):
    rng = np.random.default_rng(3)
    states, preints = exact_chain(clean_sequence, count=2)
    a, b = perturbed(states[0], rng), perturbed(states[1], rng)
    _, Ji, Jj = imu_factor_residual(a, b, preints[0], GRAVITY)
    numeric_i = numeric_jacobian(lambda s: imu_factor_residual(s, b, preints[0], GRAVITY)[0], a)
    numeric_j = numeric_jacobian(lambda s: imu_factor_residual(a, s, preints[0], GRAVITY)[0], b)
    np.testing.assert_allclose(Ji, numeric_i, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(Jj, numeric_j, rtol=1e-4, atol=1e-6)


def test_random_walk_rows_zero_for_equal_biases(clean_sequence):
    states, preints = exact_chain(clean_sequence, count=2)
    r, _, _ = imu_factor_residual(perturbed(states[0], np.random.default_rng(0), pose=False), states[1], preints[0], GRAVITY)
    r_same, _, _ = imu_factor_residual(states[0], states[1], preints[0], GRAVITY)
    assert r_same[9:].tolist() == [0.0] * 6
    assert np.any(r[9:] != 0.0)


def test_imu_factor_rejects_mismatched_span(clean_sequence):
    states, preints = exact_chain(clean_sequence, count=3)
    with pytest.raises(FusionError):
        imu_factor_residual(states[0], states[2], preints[0], GRAVITY)


def test_pose_residual_values():
    q = quat_from_rotvec((0.1, -0.2, 0.3))
    state = KeyframeState(1.0, np.array([1.0, 2.0, 3.0]), np.zeros(3), q)
    observed = PoseObservation(1.0, np.array([1.0, 2.0, 3.0]), q)
    r, _ = pose_obs_residual(state, observed, np.eye(6))
    np.testing.assert_allclose(r, 0.0, atol=1e-15)
    shifted = PoseObservation(1.0, np.array([0.9, 2.0, 3.0]), q)
    r, _ = pose_obs_residual(state, shifted, np.eye(6))
    np.testing.assert_allclose(r[:3], [0.1, 0.0, 0.0], atol=1e-12)


def test_pose_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    state = KeyframeState(0.0, rng.standard_normal(3), rng.standard_normal(3), quat_from_rotvec((0.3, 0.1, -0.4)))
    observed = PoseObservation(0.0, rng.standard_normal(3), quat_from_rotvec((0.2, 0.0, -0.1)))
    info = FusionConfig().observation_info()
    _, J = pose_obs_residual(state, observed, info)
    numeric = numeric_jacobian(lambda s: pose_obs_residual(s, observed, info)[0], state)
    np.testing.assert_allclose(J, numeric, rtol=1e-4, atol=1e-6)


def test_non_positive_definite_information_rejected():
    q = quat_from_rotvec((0, 0, 0))
    state = KeyframeState(0.0, np.zeros(3), np.zeros(3), q)
    with pytest.raises(FusionError):
        pose_obs_residual(state, PoseObservation(0.0, np.zeros(3), q), np.zeros((6, 6)))


# ----------------------------------------------------------------------
# Window optimization
# ----------------------------------------------------------------------
def test_noiseless_window_recovers_exact_states(clean_sequence):
    config = FusionConfig()
    states, preints = exact_chain(clean_sequence)
    rng = np.random.default_rng(7)
    start = [perturbed(states[0], rng, pose=False)] + [perturbed(s, rng) for s in states[1:]]
    graph = chain_graph(start, preints, config, pose_states=states)
    solution = optimize_window(graph)
    assert solution.cost < 1e-12
    for got, want in zip(solution.keyframes, states):
        np.testing.assert_allclose(got.p, want.p, atol=1e-6)
        np.testing.assert_allclose(got.v, want.v, atol=1e-6)
        assert np.linalg.norm(quat_log(quat_multiply(want.q.conjugate(), got.q))) < 1e-6
        np.testing.assert_allclose(got.bias.as_vector(), want.bias.as_vector(), atol=1e-6)
    history = solution.cost_history
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert history[0] > 1.0


def test_pinned_pose_does_not_move(clean_sequence):
    config = FusionConfig()
    states, preints = exact_chain(clean_sequence)
    rng = np.random.default_rng(8)
    start = [perturbed(s, rng) for s in states]
    solution = optimize_window(chain_graph(start, preints, config, pose_states=states))
    np.testing.assert_array_equal(solution.keyframes[0].p, start[0].p)
    assert solution.keyframes[0].q == start[0].q


def test_prior_at_converged_bias_keeps_solution(clean_sequence):
    config = FusionConfig()
    states, preints = exact_chain(clean_sequence)
    rng = np.random.default_rng(9)
    start = [perturbed(states[0], rng, pose=False)] + [perturbed(s, rng) for s in states[1:]]
    first = optimize_window(chain_graph(start, preints, config, pose_states=states))
    graph = chain_graph(first.keyframes, preints, config, pose_states=states)
    for k, kf in enumerate(first.keyframes):
        graph.prior_factors.append(BiasPriorFactor(kf.bias, config.prior_weight(), k))
    before = graph_cost(graph)
    second = optimize_window(graph)
    assert abs(before - second.cost) < 1e-10


def test_graph_validation(clean_sequence):
    states, preints = exact_chain(clean_sequence, count=3)
    graph = chain_graph(states, preints[:1], FusionConfig())
    with pytest.raises(FusionError):
        optimize_window(graph)
    graph = chain_graph(states, preints, FusionConfig())
    graph.prior_factors.append(BiasPriorFactor(TRUE_BIAS, np.eye(6), 5))
    with pytest.raises(FusionError):
        graph.validate()
    with pytest.raises(FusionError):
        WindowGraph(keyframes=[]).validate()


# ----------------------------------------------------------------------
# Fixed-lag estimator
# ----------------------------------------------------------------------
def noisy_sequence(seed, duration):
    return synthesize_sequence(
        trajectory(duration), TRUE_BIAS, NoiseSpec(accel_noise_std=0.02, gyro_noise_std=0.002, rng_seed=seed)
    )


def fuse_and_score(sequence, observations, priors, prior_on, position_sigma=0.02, rotation_sigma=0.01):
    config = FusionConfig(
        prior_enabled=prior_on,
        sigma_ba=0.02,
        sigma_bw=0.002,
        obs_position_sigma=position_sigma,
        obs_rotation_sigma=rotation_sigma,
    )
    initial = KeyframeState.from_ground_truth(sequence.ground_truth[0])
    result = run_fixed_lag(sequence.samples, observations, priors, config, initial)
    return position_rmse(result, sequence)


def run_scenario(seed, duration, dropouts, prior_on, position_sigma=0.02, rotation_sigma=0.01):
    sequence = noisy_sequence(seed, duration)
    observations = simulate_observations(
        sequence.ground_truth, 20.0, position_sigma, rotation_sigma, dropouts, seed=seed + 100
    )
    priors = [PriorEstimate(0.0, TRUE_BIAS)]
    return fuse_and_score(sequence, observations, priors, prior_on, position_sigma, rotation_sigma)


def constant_network(ba, bw):
    """Tiny network whose every window prediction is ``(ba, bw)``."""

    weights = init_weights(IpnetConfig.tiny(), seed=0)
    for t in weights.params.values():
        t.data[...] = 0.0
    weights.params["head_ba.bias"].data[...] = ba
    weights.params["head_bw.bias"].data[...] = bw
    return weights


def test_noiseless_run_tracks_ground_truth():
    sequence = synthesize_sequence(trajectory(10.0), TRUE_BIAS, NoiseSpec())
    observations = simulate_observations(sequence.ground_truth, 20.0)
    config = FusionConfig(prior_enabled=False)
    result = run_fixed_lag(
        sequence.samples, observations, None, config, KeyframeState.from_ground_truth(sequence.ground_truth[0])
    )
    assert len(result.trajectory) == 21
    stamps = [kf.timestamp for kf in result.trajectory]
    assert stamps == sorted(stamps)
    assert position_rmse(result, sequence) < 1e-4
    assert len(result.costs) == 20


def test_prior_reduces_error_under_observation_dropout():
    off = sum(run_scenario(seed, 16.0, [(6.0, 9.2)], prior_on=False) for seed in (1, 2))
    on = sum(run_scenario(seed, 16.0, [(6.0, 9.2)], prior_on=True) for seed in (1, 2))
    assert on < off


def test_median_error_over_seeds_with_oracle_and_network_priors():
    # 20% contiguous dropout, longer than the lag span so the window empties
    duration, dropouts = 30.0, [(12.0, 18.0)]
    weights = constant_network(TRUE_BIAS.ba + [0.01, 0.01, -0.01], TRUE_BIAS.bw + [3e-4, -3e-4, 3e-4])
    off, oracle, network = [], [], []
    for seed in range(10):
        sequence = noisy_sequence(seed, duration)
        observations = simulate_observations(sequence.ground_truth, 20.0, 0.02, 0.01, dropouts, seed=seed + 100)
        predicted = sliding_inference(sequence.samples, weights)
        assert len(predicted) > 1
        off.append(fuse_and_score(sequence, observations, None, prior_on=False))
        oracle.append(fuse_and_score(sequence, observations, [PriorEstimate(0.0, TRUE_BIAS)], prior_on=True))
        network.append(fuse_and_score(sequence, observations, predicted, prior_on=True))
    baseline = float(np.median(off))
    assert float(np.median(oracle)) <= 0.7 * baseline
    assert float(np.median(network)) <= 0.9 * baseline


def test_accurate_prior_does_not_hurt_healthy_tracking():
    off = run_scenario(3, 8.0, [], prior_on=False)
    on = run_scenario(3, 8.0, [], prior_on=True)
    assert on <= 1.05 * off


def test_vanishing_prior_matches_prior_off():
    sequence = synthesize_sequence(trajectory(5.0), TRUE_BIAS, NoiseSpec())
    observations = simulate_observations(sequence.ground_truth, 20.0)
    initial = KeyframeState.from_ground_truth(sequence.ground_truth[0])
    priors = [PriorEstimate(0.0, ImuBias((0.3, 0.3, 0.3), (0.05, 0.05, 0.05)))]
    off = run_fixed_lag(sequence.samples, observations, priors, FusionConfig(prior_enabled=False), initial)
    faint = run_fixed_lag(sequence.samples, observations, priors, FusionConfig(sigma_ba=1e8, sigma_bw=1e8), initial)
    for a, b in zip(off.trajectory, faint.trajectory):
        np.testing.assert_allclose(a.p, b.p, atol=1e-6)


def test_warmup_prior_skipped_by_default():
    sequence = synthesize_sequence(trajectory(3.0), TRUE_BIAS, NoiseSpec())
    observations = simulate_observations(sequence.ground_truth, 20.0)
    initial = KeyframeState.from_ground_truth(sequence.ground_truth[0])
    warm = ImuBias((0.1, 0.0, 0.0), (0.0, 0.0, 0.0))
    priors = [PriorEstimate(0.0, warm, warmup=True), PriorEstimate(1.5, TRUE_BIAS)]
    result = run_fixed_lag(sequence.samples, observations, priors, FusionConfig(lag=4), initial)
    for record in result.keyframes:
        if record.state.timestamp < 1.5 - 1e-9:
            assert record.prior is None
        else:
            assert record.prior is TRUE_BIAS
    with_warmup = run_fixed_lag(
        sequence.samples, observations, priors, FusionConfig(lag=4, use_warmup_prior=True), initial
    )
    assert with_warmup.keyframes[0].prior is warm


def test_retroactive_prior_targets_latest_estimate(clean_sequence):
    states, preints = exact_chain(clean_sequence, count=3)
    other = ImuBias((0.1, 0.0, 0.0), (0.0, 0.0, 0.0))
    slots = [
        _Slot(states[0], None, other),
        _Slot(states[1], None, None, preints[0]),
        _Slot(states[2], None, TRUE_BIAS, preints[1]),
    ]
    default = _build_graph(slots, FusionConfig())
    assert [(f.keyframe, f.target) for f in default.prior_factors] == [(0, other), (2, TRUE_BIAS)]
    retro = _build_graph(slots, FusionConfig(retroactive_prior=True))
    assert [f.target for f in retro.prior_factors] == [TRUE_BIAS] * 3
    assert _build_graph(slots, FusionConfig(prior_enabled=False)).prior_factors == []


def test_stream_checks():
    samples = [ImuSample(t, (0, 0, 0), (0, 0, 9.81)) for t in (0.0, 0.1, 1.0, 1.1)]
    initial = KeyframeState(0.0, np.zeros(3), np.zeros(3), quat_from_rotvec((0, 0, 0)))
    with pytest.raises(FusionError):
        run_fixed_lag(samples, [], None, FusionConfig(), initial)
    with pytest.raises(FusionError):
        run_fixed_lag(samples[:1], [], None, FusionConfig(), initial)


def test_initialization_needs_observations(clean_sequence):
    observations = simulate_observations(clean_sequence.ground_truth, 20.0, dropouts=[(0.0, 10.0)])
    assert all(o.dropped for o in observations)
    with pytest.raises(FusionError):
        run_fixed_lag(clean_sequence.samples, observations, None, FusionConfig())


def test_initialization_from_observations(clean_sequence):
    observations = simulate_observations(clean_sequence.ground_truth, 20.0)
    result = run_fixed_lag(clean_sequence.samples[:401], observations, None, FusionConfig(prior_enabled=False))
    np.testing.assert_allclose(result.trajectory[0].p, clean_sequence.ground_truth[0].position, atol=1e-9)
    assert len(result.trajectory) == 5


def test_simulated_observations():
    sequence = synthesize_sequence(trajectory(2.0), ImuBias.zero(), NoiseSpec())
    exact = simulate_observations(sequence.ground_truth, 20.0, dropouts=[(0.5, 1.0)])
    assert len(exact) == 41
    assert [o.dropped for o in exact].count(True) == 10
    np.testing.assert_array_equal(exact[7].position, sequence.ground_truth[70].position)
    noisy_a = simulate_observations(sequence.ground_truth, 20.0, 0.01, 0.01, seed=3)
    noisy_b = simulate_observations(sequence.ground_truth, 20.0, 0.01, 0.01, seed=3)
    assert all(np.array_equal(a.position, b.position) for a, b in zip(noisy_a, noisy_b))
    assert simulate_observations([], 20.0) == []


def test_config_round_trip_and_validation():
    config = FusionConfig(lag=6, sigma_ba=0.2)
    again = FusionConfig.from_dict(config.to_dict())
    assert again.to_dict() == config.to_dict()
    np.testing.assert_allclose(np.diag(config.prior_weight()), [5.0] * 3 + [100.0] * 3)
    with pytest.raises(FusionError):
        FusionConfig(lag=1)
    with pytest.raises(FusionError):
        FusionConfig(sigma_bw=0.0)
    with pytest.raises(FusionError):
        FusionConfig(keyframe_period=-0.5)
