"""Joint calibration of several single-asset simulators through a Gaussian copula.

Each asset's latent series is standard normal by construction, so the joint
noise is modelled as ``N(0, Sigma)`` with identity diagonal blocks. The
blocks keep every marginal simulator intact while the off-diagonal blocks
carry the cross-asset dependence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import flow, nn, simulator

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
PROJ_TOL = 1e-8
PROJ_ITERS = 100


class ProjectionError(RuntimeError):
    pass


@dataclass
class JointLatentSeries:
    values: np.ndarray     # (T, N*d)
    dates: np.ndarray
    block_sizes: tuple
    dropped: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[1] != sum(self.block_sizes):
            raise nn.ShapeError("column count does not match the asset blocks")


def stack_latents(latents, dates=None) -> JointLatentSeries:
    """Inner-join per-asset latent series on their dates and stack them column-wise."""
    latents = [np.atleast_2d(np.asarray(z, dtype=float)) for z in latents]
    if not latents:
        raise ValueError("no latent series given")
    if dates is None:
        lengths = {len(z) for z in latents}
        if len(lengths) != 1:
            raise ValueError("series of different length need dates for alignment")
        dates = [np.arange(len(latents[0]))] * len(latents)
    dates = [np.asarray(d) for d in dates]
    common = dates[0]
    for d in dates[1:]:
        common = np.intersect1d(common, d)
    if common.size == 0:
        raise ValueError("latent series share no dates")
    blocks, dropped = [], {}
    for i, (z, d) in enumerate(zip(latents, dates)):
        if len(z) != len(d):
            raise nn.ShapeError(f"asset {i}: {len(z)} rows but {len(d)} dates")
        keep = np.isin(d, common)
        dropped[i] = d[~keep].tolist()
        order = np.argsort(d[keep], kind="stable")
        blocks.append(z[keep][order])
    for i, lost in dropped.items():
        if lost:
            logger.warning("asset %d: %d dates dropped in alignment", i, len(lost))
    return JointLatentSeries(np.hstack(blocks), np.sort(common), tuple(z.shape[1] for z in latents), dropped)


def _block_slices(block_sizes):
    edges = np.cumsum([0, *block_sizes])
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _set_identity_blocks(S, block_sizes):
    S = S.copy()
    for sl in _block_slices(block_sizes):
        n = sl.stop - sl.start
        S[sl, sl] = np.eye(n)
    return S


def _psd_floor(S, floor):
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def project_block_correlation(S, block_sizes, floor: float = EIG_FLOOR, tol: float = PROJ_TOL,
                              max_iter: int = PROJ_ITERS):
    """Nearest PSD matrix with identity diagonal blocks (alternating projections, Dykstra-corrected).

    Returns ``(matrix, iterations, residual)``. The identity blocks are exact in
    the result. If the alternating projections stop short of an eigenvalue
    floor of zero, the off-diagonal blocks are shrunk toward zero until the
    matrix is PSD.
    """
    S = _set_identity_blocks((np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T) / 2, block_sizes)
    if np.linalg.eigvalsh(S).min() >= floor:
        return S, 0, 0.0
    Y, dS = S.copy(), np.zeros_like(S)
    residual, it = np.inf, 0
    for it in range(1, max_iter + 1):
        R = Y - dS
        X = _psd_floor(R, floor)
        dS = X - R
        Y_new = _set_identity_blocks(X, block_sizes)
        residual = np.linalg.norm(Y_new - Y, "fro")
        Y = Y_new
        if residual < tol and np.linalg.eigvalsh(Y).min() >= 0:
            break
    if np.linalg.eigvalsh(Y).min() < 0:
        logger.warning("alternating projections ended at residual %.3g; shrinking cross blocks", residual)
        eye = _set_identity_blocks(np.zeros_like(Y), block_sizes)
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = (lo + hi) / 2
            if np.linalg.eigvalsh(eye + mid * (Y - eye)).min() >= 0:
                lo = mid
            else:
                hi = mid
        Y = eye + lo * (Y - eye)
        if np.linalg.eigvalsh(Y).min() < -EIG_FLOOR:
            raise ProjectionError(f"could not restore positive semi-definiteness (residual {residual:.3g})")
    return Y, it, float(residual)


@dataclass
class GaussianCopula:
    covariance: np.ndarray
    factor: np.ndarray
    block_sizes: tuple
    mean: np.ndarray | None = None      # diagnostic only; sampling is centred
    meta: dict = field(default_factory=dict)

    def state(self) -> dict:
        return {"covariance": self.covariance, "factor": self.factor, "block_sizes": list(self.block_sizes),
                "mean": self.mean if self.mean is not None else np.zeros(len(self.covariance)),
                "meta": dict(self.meta)}

    @classmethod
    def from_state(cls, st: dict) -> "GaussianCopula":
        return cls(np.asarray(st["covariance"]), np.asarray(st["factor"]), tuple(int(b) for b in st["block_sizes"]),
                   np.asarray(st["mean"]), dict(st.get("meta", {})))


def _factorize(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        # singular but PSD: symmetric square root via the eigendecomposition
        vals, vecs = np.linalg.eigh(S)
        return vecs * np.sqrt(np.maximum(vals, 0.0))


def copula_from_covariance(S, block_sizes, mean=None) -> GaussianCopula:
    S, iters, resid = project_block_correlation(S, block_sizes)
    if len(block_sizes) == 1:
        factor = np.eye(len(S))
    else:
        factor = _factorize(S)
    return GaussianCopula(S, factor, tuple(block_sizes), mean,
                          {"projection_iterations": iters, "projection_residual": resid})


def estimate_block_cov(series: JointLatentSeries, p: int = 2) -> GaussianCopula:
    """Sample covariance with divisor ``T - p - 1``, identity blocks imposed, projected to PSD."""
    Z = np.asarray(series.values, dtype=float)
    T, width = Z.shape
    if T < width + 1:
        raise ValueError(f"need at least {width + 1} rows for a {width}-column covariance, got {T}")
    denom = T - p - 1
    if denom <= 0:
        raise ValueError("too few rows for the covariance divisor")
    mu = Z.mean(0)
    S = (Z - mu).T @ (Z - mu) / denom
    return copula_from_covariance(S, series.block_sizes, mu)


def sample_joint_noise(copula: GaussianCopula, count: int, seed: int = 0) -> np.ndarray:
    """``count`` rows of ``N(0, Sigma)``."""
    z = np.random.default_rng(seed).standard_normal((int(count), len(copula.covariance)))
    return z @ copula.factor.T


def joint_path_noise(copula: GaussianCopula, seed: int, n_conditions: int, M: int, tau: int) -> np.ndarray:
    """Correlated noise ``(C, M, tau, N*d)`` with one stream per (condition, path).

    The per-path streams match :func:`simulator.path_noise`, so a single
    asset with an identity factor reproduces single-asset sampling bit for bit.
    """
    base = simulator.path_noise(seed, n_conditions, M, tau, len(copula.covariance))
    if len(copula.block_sizes) == 1:
        return base
    return base @ copula.factor.T


@dataclass
class JointSimulator:
    models: list
    copula: GaussianCopula | None = None
    joint_flow: flow.FlowStack | None = None

    def __post_init__(self):
        widths = tuple(m.d for m in self.models)
        if self.copula is not None and tuple(self.copula.block_sizes) != widths:
            raise nn.ShapeError(f"copula blocks {self.copula.block_sizes} do not match simulators {widths}")


def sample_joint_paths(joint: JointSimulator, conditions, M: int, tau: int, retain="all", seed: int = 0,
                       threshold: float = simulator.EXPLOSION_THRESHOLD):
    """Simulate all assets together; one exploding asset rejects the whole joint path.

    ``conditions[i]`` holds the lag windows of asset ``i`` (same count for every
    asset). Returns one :class:`simulator.PathSet` per asset with aligned rows.
    """
    models = joint.models
    conds = [np.atleast_2d(np.asarray(c, dtype=float)) for c in conditions]
    C = conds[0].shape[0]
    if any(c.shape[0] != C for c in conds):
        raise ValueError("every asset needs the same number of conditions")
    width = sum(m.d for m in models)
    if joint.joint_flow is not None:
        base = simulator.path_noise(seed, C, M, tau, width).reshape(-1, width)
        noise = flow.flow_forward(joint.joint_flow, base)[0].reshape(C, M, tau, width)
    elif joint.copula is not None:
        noise = joint_path_noise(joint.copula, seed, C, M, tau)
    else:
        noise = simulator.path_noise(seed, C, M, tau, width)
    keep = simulator._retain_length(retain, tau)
    windows = [np.repeat(c, M, axis=0) for c in conds]
    paths, alive, reasons = simulator.roll_paths(models, windows, noise.reshape(C * M, tau, width), threshold)
    cidx, pidx = np.divmod(np.arange(C * M), M)
    rejected = int((~alive).sum())
    return [simulator.PathSet(p[alive][:, tau - keep:], cidx[alive], pidx[alive], C * M, rejected, dict(reasons),
                              {"M": M, "tau": tau, "retain": keep, "seed": seed}) for p in paths]


def copula_nll(copula: GaussianCopula, Z) -> float:
    """Average negative log-density per row under ``N(0, Sigma)``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    L = np.linalg.cholesky(copula.covariance)
    q = np.linalg.solve(L, Z.T)
    k = Z.shape[1]
    return float(0.5 * (q ** 2).sum(0).mean() + np.log(np.diag(L)).sum() + 0.5 * k * np.log(2 * np.pi))


def train_joint_flow(series: JointLatentSeries, config: nn.TrainConfig | None = None, train_fraction: float = 0.8,
                     n_knots: int = 32, hidden=(64, 64, 64)):
    """Unconditional flow over stacked latents; unlike the copula it also reshapes the marginals."""
    Z = np.asarray(series.values, dtype=float)
    if len(Z) < 2:
        raise ValueError("need at least two rows")
    config = config or nn.TrainConfig(learning_rate=1e-3, dropout_rate=0.1, max_iterations=2000,
                                      patience=100, seed=0)
    tr, te = nn.split_shuffle(len(Z), train_fraction, config.seed)
    fl, hist = flow.train_flow(Z[tr], None, config, Z[te], None, n_knots=n_knots, hidden=hidden)
    fl.meta["note"] = "joint flow alters the per-asset latent marginals"
    return fl, hist
