import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voltsim import flow, nn

HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)   # 1.4189...


def random_flow(dim=2, cond_dim=3, n_layers=2, n_knots=8, seed=0, learn_v=True):
    fl = flow.FlowStack.build(dim, cond_dim, n_layers, n_knots, (16, 16), seed=seed, zero_last=False,
                              learn_v=learn_v)
    fl.set_output_box(-np.arange(1, dim + 1) * 2.0, np.arange(1, dim + 1) * 3.0)
    return fl


def test_uniform_knots_from_zero_logits():
    k = flow.knots_from_raw(np.zeros(4), np.zeros(4))
    np.testing.assert_allclose(k.u.numpy(), [0.25, 0.5, 0.75, 1.0], atol=1e-15)
    np.testing.assert_allclose(k.v.numpy(), [0.25, 0.5, 0.75, 1.0], atol=1e-15)


def test_dominant_logit_takes_most_mass():
    k = flow.knots_from_raw(np.array([10.0, 0, 0, 0]), np.zeros(4))
    # softmax mass 0.99986382 mixed with the 1e-4 floor
    assert float(k.u[0]) == pytest.approx(0.9995638732310655, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(raw=arrays(np.float64, 12, elements=st.floats(-30, 30)))
def test_knots_increase_to_one(raw):
    k = flow.knots_from_raw(raw, raw[::-1].copy())
    u = k.u.numpy()
    assert np.all(np.diff(u) > 0) and u[-1] == 1.0 and u[0] > 0


def test_identity_knots_map_identically():
    k = flow.knots_from_raw(np.zeros(8), np.zeros(8))
    z = torch.linspace(-2, 3, 50, dtype=nn.DTYPE)
    x, ls = flow.spline_forward(z, k, (-1.0, 1.0), (-1.0, 1.0))
    torch.testing.assert_close(x, z)
    assert float(ls.abs().max()) < 1e-14


def test_knot_nodes_interpolate():
    rng = np.random.default_rng(0)
    k = flow.knots_from_raw(rng.normal(size=6), rng.normal(size=6))
    x, _ = flow.spline_forward(k.u[:-1], k)
    torch.testing.assert_close(x, k.v[:-1], atol=1e-15, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_spline_inverse_round_trip_including_tails(seed):
    rng = np.random.default_rng(seed)
    k = flow.knots_from_raw(rng.normal(size=16) * 2, rng.normal(size=16) * 2)
    z = torch.as_tensor(rng.uniform(-15, 15, 10_000))
    box_in, box_out = (-5.0, 5.0), (-0.7, 2.1)
    x, ls = flow.spline_forward(z, k, box_in, box_out)
    z2, ls_inv = flow.spline_inverse(x, k, box_in, box_out)
    assert float((z2 - z).abs().max()) < 1e-9
    assert float((ls + ls_inv).abs().max()) < 1e-9


def test_identity_flow_is_identity():
    fl = flow.FlowStack.build(3, 2, n_layers=2, n_knots=8, hidden=(8,))
    z = np.random.default_rng(0).normal(size=(20, 3)) * 2
    x, ld = flow.flow_forward(fl, z, np.ones(2))
    np.testing.assert_allclose(x, z, atol=1e-12)
    np.testing.assert_allclose(ld, 0.0, atol=1e-12)


def test_flow_round_trip():
    fl = random_flow()
    rng = np.random.default_rng(1)
    z, c = rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 3))
    x, ld = flow.flow_forward(fl, z, c)
    z2, ld_inv = flow.flow_inverse(fl, x, c)
    assert np.abs(z2 - z).max() < 1e-6
    assert np.abs(ld + ld_inv).max() < 1e-9


def test_log_det_matches_numerical_jacobian():
    fl = random_flow(dim=3, n_layers=2)
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(10):
        z, c = rng.normal(size=3), rng.normal(size=3)
        _, ld = flow.flow_forward(fl, z, c)
        J = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, k] = (flow.flow_forward(fl, z + e, c)[0] - flow.flow_forward(fl, z - e, c)[0]) / (2 * h)
        assert abs(ld - np.log(abs(np.linalg.det(J)))) < 1e-4


def test_map_is_triangular():
    fl = random_flow(dim=3)
    z, c = np.array([0.1, -0.3, 0.5]), np.zeros(3)
    base = flow.flow_forward(fl, z, c)[0]
    moved = flow.flow_forward(fl, z + np.array([0, 0, 0.2]), c)[0]
    np.testing.assert_array_equal(base[:2], moved[:2])


def test_condition_changes_output():
    fl = random_flow(seed=5)
    z = np.array([0.4, -0.2])
    a = flow.flow_forward(fl, z, np.zeros(3))[0]
    b = flow.flow_forward(fl, z, np.ones(3))[0]
    assert np.abs(a - b).max() > 1e-6


def test_identity_flow_density_at_origin():
    fl = flow.FlowStack.build(1, 0, n_knots=8, hidden=(4,))
    assert flow.cond_log_density(fl, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)


def test_conditional_density_integrates_to_one():
    fl = random_flow(dim=1, cond_dim=2, n_layers=2, n_knots=16)
    grid = np.linspace(-60, 60, 400_001)
    for c in (np.zeros(2), np.array([1.0, -2.0])):
        dens = np.exp(flow.cond_log_density(fl, grid[:, None], c))
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_doubling_output_box_halves_density():
    fl = random_flow(dim=1, cond_dim=0, n_layers=1)
    lo, hi = fl.layers[-1].box_out
    z = np.random.default_rng(3).normal(size=(50, 1))
    x, _ = flow.flow_forward(fl, z)
    p1 = flow.cond_log_density(fl, x)
    centre = (lo + hi) / 2
    fl.set_output_box(centre + 2 * (lo - centre), centre + 2 * (hi - centre))
    x2 = centre + 2 * (x - centre)
    p2 = flow.cond_log_density(fl, x2)
    np.testing.assert_allclose(p2, p1 - math.log(2), atol=1e-12)


def test_identity_flow_nll_is_normal_entropy():
    fl = flow.FlowStack.build(1, 0, n_knots=8, hidden=(4,))
    x = np.random.default_rng(0).standard_normal((100_000, 1))
    assert float(flow.nll_loss(fl, x).detach()) == pytest.approx(HALF_LOG_2PI_E, abs=0.02)


def test_nll_gradient_matches_finite_differences():
    fl = random_flow(dim=2, cond_dim=2, n_layers=1, n_knots=6)
    rng = np.random.default_rng(4)
    x, c = nn.as_tensor(rng.normal(size=(30, 2))), nn.as_tensor(rng.normal(size=(30, 2)))
    loss = lambda: flow.nll_loss(fl, x, c)
    exact = nn.grad(loss, fl.params)
    h = 1e-6
    with torch.no_grad():
        for p, g in list(zip(fl.params, exact))[::2]:
            flat = p.data.view(-1)
            for k in range(0, flat.numel(), 7):
                old = flat[k].item()
                flat[k] = old + h
                up = float(loss())
                flat[k] = old - h
                down = float(loss())
                flat[k] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - float(g.view(-1)[k])) <= 1e-4 * max(abs(fd), 1e-2)


def test_training_recovers_generating_flow():
    gen = flow.FlowStack.build(2, 0, 1, 8, (16,), seed=3, zero_last=False)
    gen.set_output_box([-3, -3], [3, 3])
    X, _ = flow.flow_forward(gen, np.random.default_rng(0).standard_normal((6000, 2)))
    x_train, x_test = X[:4000], X[4000:]
    truth = -flow.cond_log_density(gen, x_test).mean()
    cfg = nn.TrainConfig(learning_rate=1e-3, max_iterations=3000, patience=200, seed=0)
    fl, hist = flow.train_flow(x_train, None, cfg, x_test, None, n_knots=32, hidden=(32, 32))
    assert len(hist.train) == len(hist.test) == hist.steps
    assert (min(hist.test) - truth) / 2 < 0.05


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    x, c = rng.normal(size=(200, 2)), rng.normal(size=(200, 1))
    cfg = nn.TrainConfig(learning_rate=1e-2, max_iterations=20, seed=3)
    a, _ = flow.train_flow(x, c, cfg, n_knots=8, hidden=(8,))
    b, _ = flow.train_flow(x, c, cfg, n_knots=8, hidden=(8,))
    for p, q in zip(a.params, b.params):
        assert torch.equal(p, q)


def test_state_round_trip():
    fl = random_flow()
    clone = flow.FlowStack.from_state(fl.state())
    z, c = np.random.default_rng(0).normal(size=(5, 2)), np.ones((5, 3))
    assert np.array_equal(flow.flow_forward(fl, z, c)[0], flow.flow_forward(clone, z, c)[0])


def test_bad_inputs():
    fl = random_flow()
    with pytest.raises(nn.ShapeError):
        flow.flow_forward(fl, np.zeros((2, 2)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        flow.flow_inverse(fl, np.array([[np.nan, 0.0]]), np.zeros(3))
    with pytest.raises(ValueError):
        flow.nll_loss(fl, np.zeros((0, 2)), np.zeros((0, 3)))
