"""Synthetic stochastic-volatility market used in place of vendor data.

Daily log-variance, skew and curvature factors follow AR(1) processes.
Returns are conditionally normal with the martingale drift and a negative
shock correlation to the variance factor (leverage). Each day's call grid is
priced by undiscounted Black-Scholes on the unit forward with a smile and
term-structure shaped total variance, then projected onto the nearest
arbitrage-free DLV surface.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import dlv
from .dlv import StrikeGrid

logger = logging.getLogger(__name__)


@dataclass
class SynthParams:
    days: int = 2000
    mean_variance: float = 0.04
    persistence: float = 0.95
    vol_of_logvar: float = 0.2
    leverage: float = -0.6
    skew_mean: float = -0.8
    skew_sd: float = 0.5
    curvature_mean: float = 2.0
    curvature_sd: float = 1.2
    factor_persistence: float = 0.9
    mean_reversion: float = 4.0     # term-structure speed of the implied variance level
    speed_sd: float = 0.0           # sd of the log term-structure speed factor (0 = constant speed)
    wing_sd: float = 0.0            # sd of the cubic wing-asymmetry factor (0 = no such factor)
    flat: bool = False              # no smile, no term structure
    cross_correlation: float = 0.5  # return/variance shock correlation between assets
    burn_in: int = 250


def bs_call(x, total_variance):
    """Undiscounted Black-Scholes call on the unit forward, relative strike ``x``."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(total_variance, dtype=float)
    out = np.maximum(1.0 - x, 0.0) * np.ones(np.broadcast(x, w).shape)
    pos = w > 0
    sw = np.sqrt(np.where(pos, w, 1.0))
    d1 = (-np.log(x) + 0.5 * w) / sw
    price = norm.cdf(d1) - x * norm.cdf(d1 - sw)
    return np.where(pos, price, out)


def total_variance(grid: StrikeGrid, variance, skew, curvature, params: SynthParams,
                   log_speed=None, wing=None):
    """Total implied variance ``(T, m, n+2)`` from the daily factors."""
    k = np.log(grid.x)[None, None, :]
    tau = grid.taus[None, :, None]
    v = np.asarray(variance, dtype=float)[:, None, None]
    if params.flat:
        return v * tau * np.ones_like(k)
    kappa = params.mean_reversion
    if log_speed is not None:
        kappa = kappa * np.exp(np.asarray(log_speed, dtype=float))[:, None, None]
    blend = (1 - np.exp(-kappa * tau)) / (kappa * tau)
    level = params.mean_variance + (v - params.mean_variance) * blend
    decay = np.sqrt(grid.taus[0] / tau)
    a = np.asarray(skew, dtype=float)[:, None, None]
    b = np.asarray(curvature, dtype=float)[:, None, None]
    c = 0.0 if wing is None else np.asarray(wing, dtype=float)[:, None, None]
    shape = np.exp((a * k + b * k ** 2 + c * k ** 3) * decay)
    return level * tau * shape


def bs_call_surfaces(grid: StrikeGrid, variance, skew=None, curvature=None, params: SynthParams | None = None,
                     log_speed=None, wing=None):
    """Raw Black-Scholes grids with boundary columns pinned to intrinsic value."""
    params = params or SynthParams()
    n = len(np.atleast_1d(variance))
    skew = np.zeros(n) if skew is None else skew
    curvature = np.zeros(n) if curvature is None else curvature
    w = total_variance(grid, np.atleast_1d(variance), skew, curvature, params, log_speed, wing)
    prices = bs_call(grid.x[None, None, :], w)
    prices[..., 0] = 1.0 - grid.x[0]
    prices[..., -1] = 0.0
    return prices


def _ar1(rng, n, mean, sd, phi, shocks=None):
    shocks = rng.standard_normal(n) if shocks is None else shocks
    out = np.empty(n)
    level = mean
    innov = sd * np.sqrt(1 - phi ** 2)
    for t in range(n):
        level = mean + phi * (level - mean) + innov * shocks[t]
        out[t] = level
    return out


def simulate_factors(params: SynthParams, n_assets: int, seed: int):
    """Daily factors and returns for ``n_assets`` correlated markets.

    Returns a list of dicts with keys ``logvar``, ``skew``, ``curvature``,
    ``log_speed``, ``wing`` and ``returns`` (``returns[t]`` is the log-return from day ``t-1`` to ``t``,
    ``returns[0] = 0``).
    """
    rng = np.random.default_rng(seed)
    total = params.days + params.burn_in
    rho_x = params.cross_correlation
    common = rng.standard_normal((total, 2))
    out = []
    for _ in range(n_assets):
        own = rng.standard_normal((total, 2))
        eps = np.sqrt(rho_x) * common[:, 0] + np.sqrt(1 - rho_x) * own[:, 0]
        xi_raw = np.sqrt(rho_x) * common[:, 1] + np.sqrt(1 - rho_x) * own[:, 1]
        xi = params.leverage * eps + np.sqrt(1 - params.leverage ** 2) * xi_raw
        mu = np.log(params.mean_variance)
        phi = params.persistence
        h = np.empty(total)
        r = np.zeros(total)
        h[0] = mu
        for t in range(1, total):
            v_prev = np.exp(h[t - 1])
            r[t] = np.sqrt(v_prev / dlv.DAYS_PER_YEAR) * eps[t] - 0.5 * v_prev / dlv.DAYS_PER_YEAR
            h[t] = mu + phi * (h[t - 1] - mu) + params.vol_of_logvar * xi[t]
        skew = _ar1(rng, total, params.skew_mean, params.skew_sd, params.factor_persistence)
        curv = _ar1(rng, total, params.curvature_mean, params.curvature_sd, params.factor_persistence)
        speed = _ar1(rng, total, 0.0, params.speed_sd, params.factor_persistence)
        wing = _ar1(rng, total, 0.0, params.wing_sd, params.factor_persistence)
        b = params.burn_in
        ret = r[b:].copy()
        ret[0] = 0.0
        out.append({"logvar": h[b:], "skew": skew[b:], "curvature": curv[b:], "log_speed": speed[b:],
                    "wing": wing[b:], "returns": ret})
    return out


def market_from_factors(grid: StrikeGrid, factors: dict, params: SynthParams,
                        bounds=(dlv.SIGMA_LOW, dlv.SIGMA_HIGH)):
    """Spot path plus arbitrage-free call grids and their DLVs for one asset."""
    raw = bs_call_surfaces(grid, np.exp(factors["logvar"]), factors["skew"], factors["curvature"], params,
                           factors.get("log_speed"), factors.get("wing"))
    sig, objective, _ = dlv.fit_arbitrage_free_batch(raw, grid, bounds)
    prices = dlv.prices_from_dlvs(sig, grid)
    bad = [t for t in range(len(prices)) if not dlv.check_arbitrage(dlv.CallSurface(grid, prices[t]), bounds).ok]
    if bad:
        raise dlv.ArbitrageError(f"synthetic surfaces on days {bad[:5]} still carry arbitrage after fitting")
    spot = 100.0 * np.exp(np.cumsum(factors["returns"]))
    logger.info("synthetic fit: worst mean-squared price error %.3g", objective.max())
    return spot, prices, sig, objective
