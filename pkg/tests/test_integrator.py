import numpy as np
import pytest
from conftest import linear_model

from interaction_flows.density import UniformBox
from interaction_flows.errors import ConfigurationError, DeterminantSignError, SnapshotError
from interaction_flows.integrator import (
    FlowState,
    NoiseDraw,
    SimConfig,
    brownian_increments,
    check_stability,
    em_step,
    run,
    sample_initial_ensemble,
    tracked_points,
)
from interaction_flows.kernels import LinearKernel, MeanRevertingDiffusion, ModelSpec


def test_sim_config_snapshots():
    config = SimConfig(dt=0.1, T=1.0, N=4, save_every=5)
    assert config.n_steps == 10
    np.testing.assert_array_equal(config.snapshot_steps, [0, 5, 10])
    np.testing.assert_allclose(config.snapshot_times, [0.0, 0.5, 1.0])


def test_sim_config_collects_violations():
    with pytest.raises(ConfigurationError, match='dt must be > 0'):
        SimConfig(dt=0.0, T=1.0, N=4)
    with pytest.raises(ConfigurationError, match='not a multiple of save_every'):
        SimConfig(dt=0.1, T=1.0, N=4, save_every=3)
    with pytest.raises(ConfigurationError, match='N must be >= 1'):
        SimConfig(dt=0.1, T=1.0, N=0)


def test_stability_cap():
    check_stability(linear_model(10.0), 0.04)
    with pytest.raises(ConfigurationError, match='stability cap'):
        check_stability(linear_model(10.0), 0.06)


def test_noise_streams_are_per_replica():
    a = brownian_increments(1, 0, 50, 2, 3, 0.01)
    b = brownian_increments(1, 0, 50, 2, 3, 0.01)
    c = brownian_increments(1, 1, 50, 2, 3, 0.01)
    assert a.shape == (50, 2, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_initial_ensemble_is_deterministic(unit_interval):
    a = sample_initial_ensemble(unit_interval, 32, 5)
    b = sample_initial_ensemble(unit_interval, 32, 5)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert np.all((a.positions >= 0.0) & (a.positions <= 1.0))


def test_tracked_points_put_grid_first(unit_interval):
    config = SimConfig(dt=0.1, T=1.0, N=4, grid=4)
    u0, weights, is_grid = tracked_points(unit_interval, config, probes=[[0.3]])
    np.testing.assert_allclose(u0[:, 0], [0.125, 0.375, 0.625, 0.875, 0.3])
    np.testing.assert_allclose(weights, [0.25, 0.25, 0.25, 0.25, 0.0])
    np.testing.assert_array_equal(is_grid, [True, True, True, True, False])


def test_em_step_without_noise(contraction_model):
    particles = np.array([[[0.0], [1.0]]])
    state = FlowState.start(particles, np.array([[2.0]]))
    new = em_step(state, NoiseDraw.zeros(1, 1, 1), contraction_model, dt=0.1)
    # mean 0.5; x' = -(x - 0.5)
    np.testing.assert_allclose(new.x[0, 0], [2.0 - 0.1 * 1.5])
    np.testing.assert_allclose(new.particles[0, :, 0], [0.05, 0.95])
    np.testing.assert_allclose(new.J[0, 0], [[0.9]])
    np.testing.assert_allclose(new.bv[0, 0], -0.1)
    assert new.mart[0, 0] == 0.0


def test_deterministic_contraction(contraction_trajectory):
    traj = contraction_trajectory
    T = traj.times[-1]
    assert T == pytest.approx(2.0)
    J = traj.ds['jacobian'].values[0, -1, :, 0, 0]
    np.testing.assert_allclose(J, 0.99**200, rtol=1e-12)
    np.testing.assert_allclose(traj.log_det()[0, -1], -2.0, rtol=1e-12)

    # The ensemble mean does not move, tracked points approach it
    mean = traj.ds['ensemble_mean'].values[0, :, 0]
    np.testing.assert_allclose(mean, mean[0], atol=1e-12)
    probe = traj.tracked_point(traj.point_ids[-1], T)
    np.testing.assert_allclose(probe.x, mean[0] + (2.0 - mean[0]) * 0.99**200, rtol=1e-10)
    assert probe.exponent(T) == pytest.approx(-1.0)


def test_snapshot_lookup_is_exact(contraction_trajectory):
    traj = contraction_trajectory
    assert traj.time_index(1.0) == 10
    with pytest.raises(SnapshotError):
        traj.time_index(0.55)
    with pytest.raises(ConfigurationError):
        traj.point_index(1000)


def test_trajectory_metadata(contraction_trajectory):
    traj = contraction_trajectory
    assert traj.d == 1
    assert traj.grid_indices.size == 8
    np.testing.assert_array_equal(traj.probe_indices, [8, 9])
    assert traj.has_particles
    assert traj.failures == []
    assert traj.sim_config['dt'] == 0.01
    assert traj.ensemble_at(2.0).n == 16


def test_thread_count_does_not_change_results(unit_interval):
    model = linear_model(1.0, C=0.3)
    config = SimConfig(dt=0.01, T=0.5, N=8, replicas=5, seed=3, save_every=10, grid=4, batch_size=2)
    serial = run(model, unit_interval, config, probes=[[0.5]], threads=1)
    parallel = run(model, unit_interval, config, probes=[[0.5]], threads=3)
    for name in ('x', 'jacobian', 'logdet_bv', 'logdet_mart', 'particles'):
        np.testing.assert_array_equal(serial.ds[name].values, parallel.ds[name].values)


def test_replica_does_not_depend_on_batching(unit_interval):
    model = linear_model(1.0, C=0.3)
    common = dict(dt=0.01, T=0.5, N=8, replicas=4, seed=11, save_every=10, grid=4)
    together = run(model, unit_interval, SimConfig(batch_size=4, **common))
    apart = run(model, unit_interval, SimConfig(batch_size=1, **common))
    np.testing.assert_allclose(together.ds['x'].values, apart.ds['x'].values, rtol=1e-10)


def test_dimension_mismatch(contraction_model):
    with pytest.raises(ConfigurationError):
        run(contraction_model, UniformBox([0.0, 0.0], [1.0, 1.0]), SimConfig(dt=0.1, T=1.0, N=4))


def test_failed_replicas_raise_or_are_recorded(unit_interval):
    # 0.99 - 10 dB turns negative within a few steps
    model = linear_model(1.0, C=10.0)
    config = SimConfig(dt=0.01, T=1.0, N=4, replicas=3, save_every=10, grid=4)
    with pytest.raises(DeterminantSignError) as info:
        run(model, unit_interval, config)
    assert info.value.step >= 1
    assert set(info.value.replicas) <= {0, 1, 2}

    traj = run(model, unit_interval, config, on_failure='record')
    assert traj.replicas.size == 0
    assert sorted(f['replica'] for f in traj.failures) == [0, 1, 2]
    assert {f['error'] for f in traj.failures} == {'DeterminantSignError'}


def test_run_contracts_point_mass_example():
    # A single particle near 0 keeps the mean at 0, so x(u0, t) = u0 (1 - dt)^(t / dt)
    model = linear_model(1.0)
    density = UniformBox([-1e-9], [1e-9])
    config = SimConfig(dt=1e-3, T=1.0, N=1, save_every=100, grid=0)
    traj = run(model, density, config, probes=[[1.0]])
    point = traj.tracked_point(traj.point_ids[0], 1.0)
    assert abs(point.x[0] - np.exp(-1.0)) <= 0.01
    assert point.bv == pytest.approx(-1.0, abs=1e-9)
    np.testing.assert_array_equal(traj.ds['logdet_mart'].values, 0.0)


def test_permuting_particles_leaves_tracked_points_unchanged():
    model = linear_model([[1.0, 0.2], [0.0, 0.5]], C=[[0.3, 0.1], [0.0, 0.2]])
    rng = np.random.default_rng(4)
    particles = rng.random((1, 6, 2))
    u0 = rng.random((3, 2))
    noise = NoiseDraw(0.05 * rng.standard_normal((1, 1, 2)))
    order = rng.permutation(6)

    state = em_step(FlowState.start(particles, u0), noise, model, dt=0.01)
    shuffled = em_step(FlowState.start(particles[:, order], u0), noise, model, dt=0.01)
    for name in ('x', 'J', 'bv', 'mart'):
        np.testing.assert_allclose(getattr(shuffled, name), getattr(state, name), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(shuffled.particles, state.particles[:, order], rtol=1e-12)


def test_permuting_tracked_points_permutes_their_paths():
    model = linear_model(1.0, C=0.3)
    rng = np.random.default_rng(9)
    particles = rng.random((2, 5, 1))
    u0 = rng.random((4, 1))
    noise = NoiseDraw(0.1 * rng.standard_normal((2, 1, 1)))
    order = np.array([2, 0, 3, 1])

    state = em_step(FlowState.start(particles, u0), noise, model, dt=0.01)
    shuffled = em_step(FlowState.start(particles, u0[order]), noise, model, dt=0.01)
    np.testing.assert_allclose(shuffled.x, state.x[:, order], rtol=1e-14)
    np.testing.assert_allclose(shuffled.mart, state.mart[:, order], rtol=1e-14)


def test_flow_preserves_order_in_one_dimension(unit_interval):
    model = linear_model(1.0, C=0.3)
    config = SimConfig(dt=1e-3, T=2.0, N=8, replicas=4, seed=2, save_every=100, grid=8)
    traj = run(model, unit_interval, config, probes=[[1.5], [3.0]])
    x = traj.ds['x'].values[..., 0]
    assert np.all(np.diff(x, axis=-1) > 0.0)


def test_em_step_matches_dense_reference_in_two_dimensions():
    A = np.array([[1.0, 0.3], [-0.2, 0.7]])
    C = np.array([[[0.3, 0.1], [0.0, 0.2]], [[0.1, -0.2], [0.05, 0.15]]])
    D = np.array([[[0.4, 0.0], [0.1, 0.2]], [[0.0, 0.3], [-0.1, 0.5]]])
    model = ModelSpec(2, LinearKernel(A), MeanRevertingDiffusion(C, D=D))
    dt = 0.01
    rng = np.random.default_rng(21)
    particles = rng.standard_normal((1, 5, 2))
    x = rng.standard_normal((3, 2))
    J = np.eye(2) + 0.1 * rng.standard_normal((1, 3, 2, 2))
    bv, mart = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    dB = np.sqrt(dt) * rng.standard_normal((1, 2, 2))

    state = FlowState(particles, x[None].copy(), J, bv, mart)
    new = em_step(state, NoiseDraw(dB), model, dt)

    m = particles[0].mean(axis=0)
    step_jac = np.eye(2) - A * dt
    for k in range(2):
        step_jac -= C[k] * dB[0, k].sum()
    for i, u in enumerate(x):
        expected = u - A @ (u - m) * dt
        for k in range(2):
            for p in range(2):
                expected += (C[k] @ (m - u) + D[k][:, p]) * dB[0, k, p]
        np.testing.assert_allclose(new.x[0, i], expected, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(new.J[0, i], step_jac @ J[0, i], rtol=1e-12, atol=1e-12)

    bv_rate = -np.trace(A) - 0.5 * 2 * sum(np.trace(c @ c) for c in C)
    mart_step = -sum(np.trace(C[k]) * dB[0, k].sum() for k in range(2))
    np.testing.assert_allclose(new.bv[0], bv[0] + bv_rate * dt, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(new.mart[0], mart[0] + mart_step, rtol=1e-12, atol=1e-12)

    first = particles[0, 0]
    expected = first - A @ (first - m) * dt
    for k in range(2):
        for p in range(2):
            expected += (C[k] @ (m - first) + D[k][:, p]) * dB[0, k, p]
    np.testing.assert_allclose(new.particles[0, 0], expected, rtol=1e-12, atol=1e-12)
