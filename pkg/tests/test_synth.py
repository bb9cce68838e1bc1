import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from voltsim import dlv, evaluation, synth
from voltsim.io import Config, synth_generate


def test_black_scholes_atm_price():
    # independent oracle: E[(S - 1)^+] for lognormal S with unit mean
    w = 0.04 * 20 / 256
    s = math.sqrt(w)
    quad, _ = integrate.quad(lambda z: max(math.exp(s * z - w / 2) - 1, 0) * stats.norm.pdf(z), -12, 12,
                             points=[s / 2], limit=200)
    assert quad == pytest.approx(0.022298647944327357, abs=1e-12)
    assert synth.bs_call(1.0, w) == pytest.approx(0.022298647944327357, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0.3, 2.0), w=st.floats(1e-4, 1.0))
def test_black_scholes_bounds_and_parity(x, w):
    c = synth.bs_call(x, w)
    assert max(1 - x, 0) - 1e-15 <= c <= 1.0
    put = synth.bs_call(1 / x, w) * x  # put-call symmetry on the unit forward
    assert c - put == pytest.approx(1 - x, abs=1e-12)


def test_zero_variance_gives_intrinsic():
    x = np.array([0.8, 1.0, 1.2])
    np.testing.assert_array_equal(synth.bs_call(x, 0.0), 1 - np.minimum(x, 1))


def test_constant_variance_without_noise():
    p = synth.SynthParams(days=500, vol_of_logvar=0.0)
    f = synth.simulate_factors(p, 1, seed=0)[0]
    np.testing.assert_allclose(np.sqrt(np.exp(f["logvar"])), 0.2, atol=1e-14)
    r = f["returns"][1:]
    assert r.std() == pytest.approx(0.2 / 16, rel=0.1)


def test_returns_are_martingale_increments():
    f = synth.simulate_factors(synth.SynthParams(days=20_000), 1, seed=1)[0]
    e = np.exp(f["returns"][1:])
    assert abs(e.mean() - 1) < 4 * e.std() / math.sqrt(len(e))


def test_volatility_clusters():
    f = synth.simulate_factors(synth.SynthParams(days=2000), 1, seed=0)[0]
    a = np.abs(f["returns"])
    assert evaluation.acf(a, [1])[0] > 1.96 / math.sqrt(len(a))
    assert np.corrcoef(f["returns"][1:-1], a[2:])[0, 1] < 0


def test_assets_are_correlated():
    fs = synth.simulate_factors(synth.SynthParams(days=5000), 2, seed=2)
    rho = np.corrcoef(fs[0]["returns"][1:], fs[1]["returns"][1:])[0, 1]
    assert rho == pytest.approx(0.5, abs=0.1)


def test_flat_surfaces_have_flat_total_variance():
    g = dlv.StrikeGrid.standard()
    w = synth.total_variance(g, np.array([0.04]), np.zeros(1), np.zeros(1), synth.SynthParams(flat=True))
    np.testing.assert_allclose(w[0], 0.04 * g.taus[:, None] * np.ones(g.n + 2), atol=0)


def test_generated_market_is_arbitrage_free():
    bundle = synth_generate(Config(days=60, n_assets=2), seed=3)
    assert set(bundle.assets) == {"asset0", "asset1"}
    g = bundle.grid
    for a in bundle.assets.values():
        assert a.prices.shape == (60, g.m, g.n + 2) and np.all(a.spot > 0)
        assert all(dlv.check_arbitrage(dlv.CallSurface(g, p)).ok for p in a.prices)
    assert bundle.fingerprint() == synth_generate(Config(days=60, n_assets=2), seed=3).fingerprint()
    assert bundle.fingerprint() != synth_generate(Config(days=60, n_assets=2), seed=4).fingerprint()
