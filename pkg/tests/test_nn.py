import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from voltsim import nn


def fd_grad(f, params, h=1e-5):
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = float(f())
            flat[k] = old - h
            down = float(f())
            flat[k] = old
            g.view(-1)[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_zero_network_gives_zero():
    net = nn.DenseNet([3, 5, 2], "softplus", weights=[np.zeros((5, 3)), np.zeros((2, 5))],
                      biases=[np.zeros(5), np.zeros(2)])
    assert torch.equal(net(np.ones(3)), torch.zeros(2, dtype=nn.DTYPE))


def test_affine_identity_layer():
    b = np.array([0.5, -1.0, 2.0])
    net = nn.DenseNet([3, 3], "relu", weights=[np.eye(3)], biases=[b])
    v = np.array([1.0, 2.0, -3.0])
    np.testing.assert_array_equal(net(v).detach().numpy(), v + b)


def test_output_layer_is_linear():
    net = nn.DenseNet([1, 1], "relu", weights=[np.array([[1.0]])], biases=[np.array([0.0])])
    assert float(net(np.array([-2.0])).detach()) == -2.0


def test_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.DenseNet([3, 2], weights=[np.zeros((3, 3))], biases=[np.zeros(2)])
    net = nn.DenseNet([3, 2])
    with pytest.raises(nn.ShapeError):
        net(np.ones(4))
    with pytest.raises(ValueError):
        nn.DenseNet([2, 2], weights=[np.full((2, 2), np.nan)], biases=[np.zeros(2)])


def test_inverted_dropout_is_unbiased():
    net = nn.DenseNet([2, 8, 1], "softplus", seed=3)
    x = nn.as_tensor(np.tile([[0.3, -0.7]], (100_000, 1)))
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        draws = net(x, 0.5, gen).numpy().ravel()
        exact = float(net(x[:1])[0, 0])
    se = draws.std() / np.sqrt(len(draws))
    assert abs(draws.mean() - exact) < 3 * se


def test_gradient_of_half_square_norm_is_params():
    net = nn.DenseNet([2, 3, 1], seed=1)
    g = nn.grad(lambda: sum((p ** 2).sum() for p in net.params) / 2, net.params)
    for gi, p in zip(g, net.params):
        torch.testing.assert_close(gi, p.detach())


def test_constant_loss_has_zero_gradient():
    net = nn.DenseNet([2, 3, 1], seed=1)
    g = nn.grad(lambda: torch.tensor(3.0, dtype=nn.DTYPE) + 0 * net.params[0].sum(), net.params)
    assert all(float(gi.abs().max()) == 0.0 for gi in g)


@pytest.mark.parametrize("activation", ["softplus", "tanh", "relu"])
def test_gradient_matches_finite_differences(activation):
    net = nn.DenseNet([3, 4, 4, 2], activation, seed=2)
    x = nn.as_tensor(np.random.default_rng(0).normal(size=(6, 3)))
    y = nn.as_tensor(np.random.default_rng(1).normal(size=(6, 2)))
    loss = lambda: ((net(x) - y) ** 2).mean()
    exact = nn.grad(loss, net.params)
    with torch.no_grad():
        approx = fd_grad(loss, net.params)
    for a, b in zip(exact, approx):
        rel = (a - b).abs().max() / max(float(b.abs().max()), 1e-8)
        assert rel < 1e-5


def test_adam_zero_gradient_leaves_params():
    p = [torch.tensor([1.0, -2.0], dtype=nn.DTYPE)]
    st_ = nn.OptimizerState.fresh(p, 0.01)
    nn.adam_step(p, [torch.zeros(2, dtype=nn.DTYPE)], st_)
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_times_sign():
    p = [torch.tensor([1.0, -2.0, 0.5], dtype=nn.DTYPE)]
    g = torch.tensor([3.0, -0.01, 200.0], dtype=nn.DTYPE)
    st_ = nn.OptimizerState.fresh(p, 0.1)
    before = p[0].clone()
    nn.adam_step(p, [g], st_)
    torch.testing.assert_close(before - p[0], 0.1 * torch.sign(g), atol=1e-6, rtol=0)


def test_adam_rejects_nonfinite_gradient():
    p = [torch.zeros(2, dtype=nn.DTYPE)]
    with pytest.raises(nn.DivergenceError):
        nn.adam_step(p, [torch.tensor([np.nan, 0.0], dtype=nn.DTYPE)], nn.OptimizerState.fresh(p, 0.1))


def test_split_sizes_and_determinism():
    tr, te = nn.split_shuffle(10, 0.8, seed=4)
    assert len(tr) == 8 and len(te) == 2 and not set(tr) & set(te)
    tr2, te2 = nn.split_shuffle(10, 0.8, seed=4)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    assert len(nn.split_shuffle(2711, 0.8)[0]) == 2168


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 500), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2 ** 16))
def test_split_is_a_partition(n, frac, seed):
    tr, te = nn.split_shuffle(n, frac, seed)
    assert len(tr) >= 1 and len(te) >= 1
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(n))


def _linear_problem(seed=0):
    rng = np.random.default_rng(seed)
    X = nn.as_tensor(rng.normal(size=(64, 3)))
    Y = X @ nn.as_tensor([[1.5], [-2.0], [0.25]]) + 0.3
    net = nn.DenseNet([3, 1], seed=seed)
    return net, X, Y


def test_linear_net_fits_linear_data():
    net, X, Y = _linear_problem()
    cfg = nn.TrainConfig(learning_rate=0.05, max_iterations=3000)
    hist = nn.train_loop(net.params, lambda idx, d, g: ((net(X[idx]) - Y[idx]) ** 2).mean(), 64, cfg)
    assert hist.train[-1] < 1e-6


def test_stop_at_takes_exact_steps():
    net, X, Y = _linear_problem()
    cfg = nn.TrainConfig(max_iterations=100, stop_at=17)
    hist = nn.train_loop(net.params, lambda idx, d, g: ((net(X[idx]) - Y[idx]) ** 2).mean(), 64, cfg)
    assert hist.steps == 17 and len(hist.train) == 17 and hist.reason == "stop_at"


def test_patience_rule_stops_early():
    net, X, Y = _linear_problem()
    cfg = nn.TrainConfig(max_iterations=500, patience=5)
    # a test loss that never improves after the first evaluation
    hist = nn.train_loop(net.params, lambda idx, d, g: ((net(X[idx]) - Y[idx]) ** 2).mean(), 64, cfg,
                         lambda: torch.tensor(1.0))
    assert hist.reason == "patience" and hist.steps == 6


def test_training_is_deterministic():
    finals = []
    for _ in range(2):
        net = nn.DenseNet([3, 8, 1], "softplus", seed=5)
        _, X, Y = _linear_problem(1)
        cfg = nn.TrainConfig(max_iterations=50, batch_size=16, dropout_rate=0.2, seed=9)
        nn.train_loop(net.params, lambda idx, d, g: ((net(X[idx], d, g) - Y[idx]) ** 2).mean(), 64, cfg)
        finals.append(torch.cat([p.detach().flatten() for p in net.params]))
    assert torch.equal(finals[0], finals[1])


def test_divergence_is_reported():
    net = nn.DenseNet([1, 1], seed=0)
    with pytest.raises(nn.DivergenceError):
        nn.train_loop(net.params, lambda idx, d, g: net.params[0].sum() * np.inf, 1, nn.TrainConfig(max_iterations=3))


def test_state_round_trip_is_exact():
    net = nn.DenseNet([4, 6, 2], "tanh", seed=11)
    clone = nn.DenseNet.from_state(net.state())
    for a, b in zip(net.params, clone.params):
        assert torch.equal(a, b)


def test_stop_at_best_keeps_the_least_test_loss_parameters():
    w = torch.zeros(1, dtype=nn.DTYPE, requires_grad=True)
    # train loss pulls w to 1; test loss is minimized at w = 0.3
    loss = lambda idx, d, g: (w - 1) ** 2
    test = lambda: (w - 0.3) ** 2
    cfg = nn.TrainConfig(learning_rate=1e-2, max_iterations=2000, patience=20, stop_at_best=True)
    hist = nn.train_loop([w], loss, 1, cfg, test)
    assert hist.reason == "patience" and hist.kept_step == int(np.argmin(hist.test)) + 1
    assert abs(float(w) - 0.3) < 0.02
    assert hist.steps == hist.kept_step + 20
