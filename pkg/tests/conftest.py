import numpy as np
import pytest

from voltsim import compression, flow, nn, simulator
from voltsim.dlv import StrikeGrid


def make_toy_model(seed=0, p=2, latent=3, vol_level=0.01):
    """Untrained but non-trivial simulator: random knot nets, small vol net."""
    d = latent + 1
    rng = np.random.default_rng(seed)
    grid = StrikeGrid.standard()
    vol = nn.DenseNet([p * d, 8, 1], "softplus", seed=seed)
    with np.errstate(all="ignore"):
        vol.weights[-1].data *= 0.1
        vol.biases[-1].data.fill_(np.log(vol_level))
    fl = flow.FlowStack.build(latent, p * d, 1, 8, (8,), seed=seed, zero_last=False)
    for net in fl.layers[0].nets:
        net.weights[-1].data *= 0.3
    fl.set_output_box(-2.5 * np.ones(latent), 2.5 * np.ones(latent))
    ae = compression.Autoencoder.build(grid.m * grid.n, latent, hidden=(8,), seed=seed)
    dlv_scaler = compression.Scaler(np.log(np.full(grid.m * grid.n, 0.2)) + rng.normal(0, 0.05, grid.m * grid.n),
                                    np.full(grid.m * grid.n, 0.3))
    code_scaler = compression.Scaler(np.zeros(latent), np.ones(latent))
    state_scaler = compression.Scaler(np.r_[0.0, np.zeros(latent)], np.r_[vol_level, np.ones(latent)])
    return simulator.SimulatorModel(vol, fl, code_scaler, state_scaler, p, ae, dlv_scaler, grid)


@pytest.fixture
def toy_model():
    return make_toy_model()


@pytest.fixture
def toy_states(toy_model):
    """A history generated by the toy model itself."""
    rng = np.random.default_rng(11)
    states = [np.zeros(toy_model.d) for _ in range(toy_model.p)]
    for _ in range(400):
        y = np.concatenate(states[::-1][:toy_model.p])
        states.append(simulator.step(toy_model, y, rng.standard_normal(toy_model.d)))
    return np.array(states)
