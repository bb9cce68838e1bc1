import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltsim import copula, evaluation, simulator

from conftest import make_toy_model


def block_truth(rho=0.6):
    S = np.eye(8)
    S[0, 4] = S[4, 0] = rho
    return S


def test_stack_latents_inner_join():
    a, b = np.ones((5, 2)), np.zeros((4, 3))
    joint = copula.stack_latents([a, b], [np.arange(5), np.arange(1, 5)])
    assert joint.values.shape == (4, 5) and joint.block_sizes == (2, 3)
    assert joint.dropped == {0: [0], 1: []}
    with pytest.raises(ValueError):
        copula.stack_latents([a, b], [np.arange(5), np.arange(10, 14)])
    same = copula.stack_latents([a, a])
    assert same.dropped == {0: [], 1: []} and same.values.shape == (5, 4)


def test_two_assets_with_d4_give_eight_columns():
    z = np.random.default_rng(0).normal(size=(50, 4))
    assert copula.stack_latents([z, z]).values.shape[1] == 8


def test_single_asset_gives_identity():
    z = np.random.default_rng(0).normal(size=(300, 4))
    cop = copula.estimate_block_cov(copula.stack_latents([z]))
    assert np.array_equal(cop.covariance, np.eye(4))
    assert np.array_equal(cop.factor, np.eye(4))


def test_cross_block_correlation_is_recovered():
    Z = np.random.default_rng(1).standard_normal((10_000, 8)) @ np.linalg.cholesky(block_truth()).T
    cop = copula.estimate_block_cov(copula.stack_latents([Z[:, :4], Z[:, 4:]]))
    S = cop.covariance
    assert np.array_equal(S[:4, :4], np.eye(4)) and np.array_equal(S[4:, 4:], np.eye(4))
    assert abs(S[0, 4] - 0.6) <= 0.05
    assert np.linalg.eigvalsh(S).min() >= 0


def test_valid_matrix_is_a_fixed_point():
    S = block_truth(0.3)
    out, iters, _ = copula.project_block_correlation(S, (4, 4))
    assert iters == 0 and np.abs(out - S).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.5, 3.0))
def test_projection_restores_psd_with_identity_blocks(seed, scale):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (6, 6)) * scale
    S = (A + A.T) / 2
    out, _, _ = copula.project_block_correlation(S, (3, 3))
    assert np.array_equal(out[:3, :3], np.eye(3)) and np.array_equal(out[3:, 3:], np.eye(3))
    assert np.linalg.eigvalsh(out).min() >= -1e-10
    np.testing.assert_allclose(out, out.T, atol=0)


def test_joint_noise_moments():
    cop = copula.copula_from_covariance(block_truth(), (4, 4))
    z = copula.sample_joint_noise(cop, 100_000, seed=3)
    C = np.cov(z, rowvar=False)
    assert np.abs(C - block_truth()).max() <= 0.02
    assert np.abs(np.cov(z[:, :4], rowvar=False) - np.eye(4)).max() <= 0.02


def test_identity_copula_gives_independent_normals():
    cop = copula.copula_from_covariance(np.eye(4), (2, 2))
    z = copula.sample_joint_noise(cop, 10_000, seed=0)
    assert all(evaluation.ks_test(z[:, k])[1] >= 0.01 for k in range(4))


def test_single_asset_joint_sampling_is_bitwise_single_sampling(toy_states):
    model = make_toy_model()
    cond = simulator.lag_windows(toy_states, 2)[:25]
    single = simulator.sample_paths(model, cond, 3, 6, seed=7)
    cop = copula.estimate_block_cov(copula.stack_latents([np.random.default_rng(0).normal(size=(100, 4))]))
    (joint,) = copula.sample_joint_paths(copula.JointSimulator([model], cop), [cond], 3, 6, seed=7)
    assert np.array_equal(single.paths, joint.paths)
    assert np.array_equal(single.condition_index, joint.condition_index)


def test_joint_paths_align_and_carry_correlation(toy_states):
    m1, m2 = make_toy_model(0), make_toy_model(1)
    S = np.eye(8)
    S[0, 4] = S[4, 0] = 0.8
    cop = copula.copula_from_covariance(S, (4, 4))
    cond = simulator.lag_windows(toy_states, 2)[:200]
    a, b = copula.sample_joint_paths(copula.JointSimulator([m1, m2], cop), [cond, cond], 2, 2, seed=0)
    assert a.paths.shape == b.paths.shape
    assert np.array_equal(a.condition_index, b.condition_index)
    corr = np.corrcoef(a.paths[:, 0, 0], b.paths[:, 0, 0])[0, 1]
    assert abs(corr - 0.8) < 0.1


def test_block_mismatch_is_rejected():
    cop = copula.copula_from_covariance(np.eye(6), (3, 3))
    with pytest.raises(ValueError):
        copula.JointSimulator([make_toy_model(0), make_toy_model(1)], cop)


def test_estimator_needs_enough_rows():
    with pytest.raises(ValueError):
        copula.estimate_block_cov(copula.stack_latents([np.ones((4, 4)), np.ones((4, 4))]))


def test_copula_state_round_trip():
    cop = copula.copula_from_covariance(block_truth(), (4, 4))
    clone = copula.GaussianCopula.from_state(cop.state())
    assert np.array_equal(clone.covariance, cop.covariance) and clone.block_sizes == (4, 4)


def test_joint_flow_matches_gaussian_copula_on_gaussian_data():
    from voltsim import nn
    Z = np.random.default_rng(2).standard_normal((3000, 4)) @ np.linalg.cholesky(
        np.array([[1, 0, .5, 0], [0, 1, 0, .5], [.5, 0, 1, 0], [0, .5, 0, 1.0]])).T
    series = copula.stack_latents([Z[:, :2], Z[:, 2:]])
    cop = copula.estimate_block_cov(series)
    tr, te = nn.split_shuffle(len(Z), 0.8, 0)
    cfg = nn.TrainConfig(learning_rate=1e-3, dropout_rate=0.0, max_iterations=2000, patience=100, seed=0)
    fl, hist = copula.train_joint_flow(series, cfg, n_knots=32, hidden=(32, 32))
    flow_nll = min(hist.test) / 4
    gauss_nll = copula.copula_nll(cop, Z[te]) / 4
    assert flow_nll - gauss_nll < 0.05
