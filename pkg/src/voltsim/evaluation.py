"""Fidelity metrics: KS tests, autocorrelations, cross-correlations, densities and stylized facts."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import simulator


@dataclass
class MetricReport:
    scalars: dict = field(default_factory=dict)    # name -> {"value": float, "n": int}
    arrays: dict = field(default_factory=dict)     # name -> {"value": ndarray, "n": int}
    meta: dict = field(default_factory=dict)

    def add(self, name: str, value, n: int):
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            self.scalars[name] = {"value": float(value), "n": int(n)}
        else:
            self.arrays[name] = {"value": value, "n": int(n)}

    def value(self, name: str):
        if name in self.scalars:
            return self.scalars[name]["value"]
        return self.arrays[name]["value"]

    def merge(self, other: "MetricReport", prefix: str = "") -> "MetricReport":
        for k, v in other.scalars.items():
            self.scalars[prefix + k] = dict(v)
        for k, v in other.arrays.items():
            self.arrays[prefix + k] = dict(v)
        for k, v in other.meta.items():
            self.meta[prefix + k] = v
        return self

    def to_json(self) -> str:
        payload = {"scalars": self.scalars,
                   "arrays": {k: {"value": np.asarray(v["value"]).tolist(), "n": v["n"]} for k, v in self.arrays.items()},
                   "meta": self.meta}
        return json.dumps(payload, indent=1, sort_keys=True, default=_jsonable)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        arrays = {k: {"value": np.asarray(v["value"], dtype=float), "n": v["n"]} for k, v in raw["arrays"].items()}
        return cls(raw["scalars"], arrays, raw["meta"])


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """``Q(lam) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2)``, clipped to [0, 1]."""
    if lam <= 0:
        return 1.0
    if lam < 0.2:
        return 1.0  # the alternating series converges too slowly here and Q is 1 to double precision
    k = np.arange(1, terms + 1)
    q = 2 * np.sum((-1.0) ** (k - 1) * np.exp(-2 * k ** 2 * lam ** 2))
    return float(min(max(q, 0.0), 1.0))


def ks_statistic(sample, cdf=ndtr) -> float:
    """``sup |F_n - F|`` evaluated on both sides of every jump of the empirical CDF."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_test(sample, cdf=ndtr):
    """One-sample KS test against ``cdf`` (standard normal by default); returns ``(D, p)``."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("KS test needs at least two observations")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite sample")
    n = x.size
    D = ks_statistic(x, cdf)
    lam = (math.sqrt(n) + 0.12 + 0.11 / math.sqrt(n)) * D
    return D, kolmogorov_sf(lam)


def acf(series, lags) -> np.ndarray:
    """Autocorrelation with the biased ``1/n`` normalization, ``rho_0 = 1``."""
    x = np.asarray(series, dtype=float).ravel()
    lags = np.atleast_1d(np.asarray(lags, dtype=int))
    if np.any(lags < 0) or np.any(lags >= len(x)):
        raise ValueError("lags must lie in [0, n)")
    c = x - x.mean()
    var = np.dot(c, c)
    if var <= 0:
        raise ValueError("zero variance series")
    return np.array([np.dot(c[:len(c) - k], c[k:]) / var for k in lags])


def cross_corr(data) -> np.ndarray:
    """Pearson correlation matrix of the columns."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a (n, k) matrix with n >= 2")
    c = X - X.mean(0)
    sd = np.sqrt((c ** 2).sum(0))
    if np.any(sd <= 0):
        raise ValueError(f"zero variance column(s) {np.flatnonzero(sd <= 0).tolist()}")
    out = (c.T @ c) / np.outer(sd, sd)
    out = np.clip((out + out.T) / 2, -1.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out


def histogram(sample, bins=50, value_range=None):
    """Density-normalized histogram; returns ``(edges, density)``."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    density, edges = np.histogram(x, bins=bins, range=value_range, density=True)
    return edges, density


def silverman_bandwidth(data) -> np.ndarray:
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if X.shape[0] == 1:
        X = X.T
    n, d = X.shape
    sd = X.std(0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde(sample, grid_x, grid_y=None):
    """Gaussian KDE with a diagonal Silverman bandwidth.

    One-dimensional with ``grid_y=None``; otherwise bivariate on the
    rectangular grid ``grid_x x grid_y`` (result indexed ``[ix, iy]``).
    """
    X = np.asarray(sample, dtype=float)
    if X.size == 0:
        raise ValueError("empty sample")
    gx = np.asarray(grid_x, dtype=float)
    if grid_y is None:
        x = X.ravel()
        h = silverman_bandwidth(x[:, None])[0]
        u = (gx[:, None] - x[None, :]) / h
        return np.exp(-0.5 * u ** 2).sum(1) / (len(x) * h * math.sqrt(2 * math.pi))
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("bivariate KDE needs an (n, 2) sample")
    gy = np.asarray(grid_y, dtype=float)
    hx, hy = silverman_bandwidth(X)
    kx = np.exp(-0.5 * ((gx[:, None] - X[None, :, 0]) / hx) ** 2) / (hx * math.sqrt(2 * math.pi))
    ky = np.exp(-0.5 * ((gy[:, None] - X[None, :, 1]) / hy) ** 2) / (hy * math.sqrt(2 * math.pi))
    return kx @ ky.T / len(X)


def sup_distance(a, b) -> float:
    """Two-sample sup distance between empirical CDFs."""
    a, b = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    pts = np.concatenate([a, b])
    Fa = np.searchsorted(a, pts, side="right") / len(a)
    Fb = np.searchsorted(b, pts, side="right") / len(b)
    return float(np.max(np.abs(Fa - Fb)))


def wasserstein1(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions."""
    a, b = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    pts = np.sort(np.concatenate([a, b]))
    Fa = np.searchsorted(a, pts[:-1], side="right") / len(a)
    Fb = np.searchsorted(b, pts[:-1], side="right") / len(b)
    return float(np.sum(np.abs(Fa - Fb) * np.diff(pts)))


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    return float(np.mean(c ** 4) / np.mean(c ** 2) ** 2 - 3.0)


def stylized_facts(returns, dlvs, atm_index=None, n_lags: int = 128) -> MetricReport:
    """Spot and DLV stylized facts for a return series and its ``(T, m, n)`` DLV grids."""
    r = np.asarray(returns, dtype=float).ravel()
    S = np.asarray(dlvs, dtype=float)
    if len(r) < n_lags + 2 or len(S) < n_lags + 2:
        raise ValueError(f"need at least {n_lags + 2} observations")
    rep = MetricReport(meta={"kind": "stylized_facts"})
    n = len(r)
    a = np.abs(r)
    rep.add("excess_kurtosis", excess_kurtosis(r), n)
    rep.add("acf_r", acf(r, range(1, 6)), n)
    rep.add("acf_abs_r", acf(a, range(1, 21)), n)
    rep.add("leverage", np.corrcoef(r[:-1], a[1:])[0, 1], n - 1)
    rep.add("leverage_lag0", np.corrcoef(r, a)[0, 1], n)
    rep.add("smile_mean_dlv", S.mean(0), len(S))
    j = S.shape[2] // 2 if atm_index is None else atm_index
    rep.add("acf_atm_dlv", acf(S[:, :, j].mean(1) if S.ndim == 3 else S[:, j], range(n_lags + 1)), len(S))
    flat = S.reshape(len(S), -1)
    rep.add("dlv_level_corr", cross_corr(flat), len(S))
    rep.add("dlv_return_corr", cross_corr(np.diff(np.log(flat), axis=0)), len(S) - 1)
    return rep


def _state_metrics(prefix: str, states, rep: MetricReport):
    X = np.asarray(states, dtype=float)
    n = len(X)
    for k in range(X.shape[1]):
        edges, dens = histogram(X[:, k], 50)
        rep.add(f"{prefix}hist_edges_{k}", edges, n)
        rep.add(f"{prefix}hist_density_{k}", dens, n)
    if n > 1 and np.all(X.std(0) > 0):
        rep.add(f"{prefix}corr", cross_corr(X), n)


def _compare(rep: MetricReport, name: str, gen, hist):
    gen, hist = np.asarray(gen, dtype=float), np.asarray(hist, dtype=float)
    rep.add(f"{name}_sup", [sup_distance(gen[:, k], hist[:, k]) for k in range(gen.shape[1])], len(gen))
    rep.add(f"{name}_w1", [wasserstein1(gen[:, k], hist[:, k]) for k in range(gen.shape[1])], len(gen))


def _path_acf(paths, lags=(1, 2)) -> np.ndarray:
    """Lag autocorrelation pooled over paths (deviations from the pooled mean)."""
    P = np.asarray(paths, dtype=float)
    mu = P.mean((0, 1))
    c = P - mu
    var = (c ** 2).sum((0, 1))
    out = []
    for k in lags:
        if P.shape[1] <= k:
            out.append(np.full(P.shape[2], np.nan))
        else:
            out.append((c[:, :-k] * c[:, k:]).sum((0, 1)) / var)
    return np.array(out)


def horizon_eval(model, states, M: int, tau: int, retain="all", seed: int = 0, mode: str = "short") -> MetricReport:
    """Sample from every historical lag window and compare generated with historical states."""
    states = np.asarray(states, dtype=float)
    windows = simulator.lag_windows(states, model.p)[:-1]
    ps = simulator.sample_paths(model, windows, M, tau, retain, seed)
    rep = MetricReport(meta={"mode": mode, "M": M, "tau": tau, "retain": ps.meta["retain"],
                             "attempted": ps.attempted, "accepted": ps.accepted})
    rep.add("rejection_fraction", ps.rejection_fraction, ps.attempted)
    if ps.accepted == 0:
        return rep
    gen = ps.paths.reshape(-1, model.d)
    hist = states[model.p:]
    rep.add("generated_states", len(gen), len(gen))
    _state_metrics("gen_level_", gen, rep)
    _state_metrics("hist_level_", hist, rep)
    _compare(rep, "level", gen, hist)
    if ps.paths.shape[1] > 1:
        d_gen = np.concatenate([ps.paths[:, 1:, :1], np.diff(ps.paths[:, :, 1:], axis=1)], -1).reshape(-1, model.d)
        d_hist = np.column_stack([hist[1:, 0], np.diff(hist[:, 1:], axis=0)])
        _state_metrics("gen_return_", d_gen, rep)
        _state_metrics("hist_return_", d_hist, rep)
        _compare(rep, "return", d_gen, d_hist)
        rep.add("gen_acf", _path_acf(ps.paths), len(gen))
    flat = hist.std(0) <= 0
    rep.add("hist_acf", np.array([np.full(2, np.nan) if flat[k] else acf(hist[:, k], [1, 2])
                                  for k in range(model.d)]).T, len(hist))
    rep.add("gen_std_r", gen[:, 0].std(), len(gen))
    rep.add("hist_std_r", hist[:, 0].std(), len(hist))
    return rep


def short_horizon_eval(model, states, M: int = 4, tau: int = 3, seed: int = 0) -> MetricReport:
    return horizon_eval(model, states, M, tau, "all", seed, "short")


def long_horizon_eval(model, states, M: int = 4, tau: int = 256, retain: int = 4, seed: int = 0) -> MetricReport:
    return horizon_eval(model, states, M, tau, retain, seed, "long")


def latent_report(latents, prefix: str = "", with_acf: bool = True) -> MetricReport:
    """Per-component KS p-values and lag-1 autocorrelation of a latent series.

    Pass ``with_acf=False`` for rows that are not consecutive days (a shuffled split).
    """
    Z = np.atleast_2d(np.asarray(latents, dtype=float))
    rep = MetricReport()
    n = len(Z)
    for k in range(Z.shape[1]):
        D, p = ks_test(Z[:, k])
        rep.add(f"{prefix}ks_stat_{k}", D, n)
        rep.add(f"{prefix}ks_p_{k}", p, n)
        if with_acf:
            rep.add(f"{prefix}acf1_{k}", acf(Z[:, k], [1])[0], n)
    return rep
