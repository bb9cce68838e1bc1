"""Discrete local volatility (DLV) codec for call-price grids.

Strikes are relative to the unit forward, rates and dividends are zero. A
grid carries ``n`` interior strikes plus one boundary strike on each side;
boundary calls are pinned to intrinsic value. Prices are stored as
``(m, n + 2)`` arrays including the boundary columns, DLVs as ``(m, n)``.
Array helpers accept leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn

DAYS_PER_YEAR = 256.0
SIGMA_LOW = 0.01
SIGMA_HIGH = 2.0
ARB_TOL = 1e-10
DEGENERATE_TOL = 1e-12


class ArbitrageError(ValueError):
    pass


@dataclass(frozen=True)
class StrikeGrid:
    maturity_days: tuple
    strikes: tuple   # x_{-1}, x_0, ..., x_{n-1}, x_n

    def __post_init__(self):
        days = np.asarray(self.maturity_days, dtype=float)
        x = np.asarray(self.strikes, dtype=float)
        if days.ndim != 1 or len(days) < 1 or np.any(days <= 0) or np.any(np.diff(days) <= 0):
            raise ValueError("maturities must be positive and strictly increasing")
        if x.ndim != 1 or len(x) < 4 or np.any(np.diff(x) <= 0) or x[0] <= 0:
            raise ValueError("strikes must be positive, strictly increasing, with at least 2 interior nodes")
        if not x[0] < 1.0 < x[-1]:
            raise ValueError("boundary strikes must bracket the unit forward")
        object.__setattr__(self, "maturity_days", tuple(float(d) for d in days))
        object.__setattr__(self, "strikes", tuple(float(s) for s in x))

    @classmethod
    def standard(cls, lower: float = 0.5, upper: float = 1.5) -> "StrikeGrid":
        """Maturities 20/40/60/120 days, interior strikes 0.80..1.20, boundary strikes ``lower``/``upper``."""
        interior = np.round(np.arange(0.80, 1.2001, 0.05), 10)
        return cls((20, 40, 60, 120), (lower, *interior, upper))

    @property
    def taus(self) -> np.ndarray:
        return np.asarray(self.maturity_days) / DAYS_PER_YEAR

    @property
    def dtaus(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.taus]))

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.strikes)

    @property
    def interior(self) -> np.ndarray:
        return self.x[1:-1]

    @property
    def m(self) -> int:
        return len(self.maturity_days)

    @property
    def n(self) -> int:
        return len(self.strikes) - 2

    @property
    def shape(self) -> tuple:
        return (self.m, self.n)


@dataclass(frozen=True)
class CallSurface:
    grid: StrikeGrid
    prices: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        if p.shape != (self.grid.m, self.grid.n + 2):
            raise ValueError(f"price array shape {p.shape} does not match grid {(self.grid.m, self.grid.n + 2)}")
        object.__setattr__(self, "prices", p)


@dataclass(frozen=True)
class DlvSurface:
    grid: StrikeGrid
    dlvs: np.ndarray
    bounds: tuple = (SIGMA_LOW, SIGMA_HIGH)

    def __post_init__(self):
        s = np.asarray(self.dlvs, dtype=float)
        lo, hi = self.bounds
        if not 0 < lo < hi:
            raise ValueError("DLV bounds must satisfy 0 < low < high")
        if s.shape != self.grid.shape:
            raise ValueError(f"DLV array shape {s.shape} does not match grid {self.grid.shape}")
        if np.any(~np.isfinite(s)) or np.any(s < lo) or np.any(s > hi):
            raise ValueError("DLVs outside their bounds")
        object.__setattr__(self, "dlvs", s)


@dataclass
class ArbReport:
    violations: list = field(default_factory=list)   # (constraint, maturity index, strike index, magnitude)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def intrinsic_prices(grid: StrikeGrid) -> np.ndarray:
    return np.maximum(1.0 - grid.x, 0.0)


def intrinsic_surface(grid: StrikeGrid) -> CallSurface:
    row = intrinsic_prices(grid)
    prices = np.tile(row, (grid.m, 1))
    prices[:, 0] = 1.0 - grid.x[0]
    prices[:, -1] = 0.0
    return CallSurface(grid, prices)


def greeks_array(prices, grid: StrikeGrid):
    """Delta, gamma and calendar theta for a ``(..., m, n+2)`` price array."""
    C = np.asarray(prices, dtype=float)
    x = grid.x
    delta = np.diff(C, axis=-1) / np.diff(x)
    gamma = np.diff(delta, axis=-1) / (0.5 * (x[2:] - x[:-2]))
    prev = np.concatenate([np.broadcast_to(intrinsic_prices(grid), C[..., :1, :].shape), C[..., :-1, :]], axis=-2)
    theta = (C - prev)[..., 1:-1]
    return delta, gamma, theta


def discrete_greeks(surface: CallSurface):
    return greeks_array(surface.prices, surface.grid)


def check_arbitrage(surface: CallSurface, bounds=(SIGMA_LOW, SIGMA_HIGH), tol: float = ARB_TOL) -> ArbReport:
    grid, C = surface.grid, surface.prices
    lo, hi = bounds
    _, gamma, theta = greeks_array(C, grid)
    x = grid.interior
    report = ArbReport()
    for j in range(grid.m):
        gap = (1.0 - x[0]) - C[j, 1]
        if gap > tol:
            report.violations.append((1, j, 0, gap))
        if -C[j, -2] > tol:
            report.violations.append((2, j, grid.n - 1, -C[j, -2]))
        scale = 0.5 * gamma[j] * x ** 2 * grid.dtaus[j]
        for i in range(grid.n):
            if -gamma[j, i] > tol:
                report.violations.append((3, j, i, -gamma[j, i]))
            under = lo ** 2 * scale[i] - theta[j, i]
            over = theta[j, i] - hi ** 2 * scale[i]
            if under > tol or over > tol:
                report.violations.append((4, j, i, max(under, over)))
    return report


def dlvs_from_prices(prices, grid: StrikeGrid, bounds=(SIGMA_LOW, SIGMA_HIGH)) -> np.ndarray:
    """Array form of :func:`calls_to_dlvs` without the arbitrage pre-check."""
    lo, hi = bounds
    _, gamma, theta = greeks_array(prices, grid)
    x = grid.interior
    denom = 0.5 * gamma * x ** 2 * grid.dtaus[:, None]
    degenerate = (np.abs(gamma) < DEGENERATE_TOL) & (np.abs(theta) < DEGENERATE_TOL)
    if np.any((gamma <= 0) & ~degenerate & (theta > 0)):
        raise ArbitrageError("zero gamma with positive calendar spread: infinite DLV")
    with np.errstate(divide="ignore", invalid="ignore"):
        sig = np.sqrt(theta / np.where(degenerate, 1.0, denom))
    sig = np.where(degenerate, lo, sig)
    # rounding can push exact-bound nodes a hair outside
    return np.clip(sig, lo, hi)


def calls_to_dlvs(surface: CallSurface, bounds=(SIGMA_LOW, SIGMA_HIGH)) -> DlvSurface:
    report = check_arbitrage(surface, bounds)
    if not report.ok:
        c, j, i, mag = report.violations[0]
        raise ArbitrageError(f"surface violates constraint {c} at maturity {j}, strike {i} "
                             f"(magnitude {mag:.3g}); {len(report.violations)} violations total")
    return DlvSurface(surface.grid, dlvs_from_prices(surface.prices, surface.grid, bounds), tuple(bounds))


def _tridiagonal_coefficients(sig, grid: StrikeGrid, j: int, lib):
    x = torch.as_tensor(grid.x) if lib is torch else grid.x
    xi = x[1:-1]
    hp = x[2:] - xi
    hm = xi - x[:-2]
    half = 0.5 * (hp + hm)
    a = 0.5 * sig ** 2 * xi ** 2 * grid.dtaus[j]
    lower = -a / (hm * half)
    upper = -a / (hp * half)
    diag = 1.0 - lower - upper
    return lower, diag, upper


def _thomas(lower, diag, upper, rhs, stack):
    """Solve tridiagonal systems along the last axis (no pivoting; diagonally dominant)."""
    n = len(rhs)
    c_prime, d_prime = [None] * n, [None] * n
    c_prime[0] = upper[0] / diag[0]
    d_prime[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - lower[i] * c_prime[i - 1]
        c_prime[i] = upper[i] / den
        d_prime[i] = (rhs[i] - lower[i] * d_prime[i - 1]) / den
    out = [None] * n
    out[-1] = d_prime[-1]
    for i in range(n - 2, -1, -1):
        out[i] = d_prime[i] - c_prime[i] * out[i + 1]
    return stack(out, -1)


def prices_from_dlvs(sig, grid: StrikeGrid):
    """Forward induction in maturity: one implicit step per slice.

    Works on numpy arrays or torch tensors of shape ``(..., m, n)`` and
    returns prices ``(..., m, n+2)`` including the pinned boundary columns.
    """
    is_torch = isinstance(sig, torch.Tensor)
    lib = torch if is_torch else np
    stack = torch.stack if is_torch else np.stack
    if not is_torch:
        sig = np.asarray(sig, dtype=float)
    if tuple(sig.shape[-2:]) != grid.shape:
        raise ValueError(f"DLV array shape {tuple(sig.shape)} does not match grid {grid.shape}")
    batch = tuple(sig.shape[:-2])
    left, right = 1.0 - grid.x[0], 0.0
    intrinsic = intrinsic_prices(grid)[1:-1]
    prev = [lib.zeros(batch, dtype=sig.dtype) + float(v) if is_torch else np.full(batch, v) for v in intrinsic]
    rows = []
    for j in range(grid.m):
        s = sig[..., j, :]
        lower, diag, upper = _tridiagonal_coefficients(s, grid, j, lib)
        lower_l = [lower[..., i] for i in range(grid.n)]
        diag_l = [diag[..., i] for i in range(grid.n)]
        upper_l = [upper[..., i] for i in range(grid.n)]
        rhs = list(prev)
        rhs[0] = rhs[0] - lower_l[0] * left
        rhs[-1] = rhs[-1] - upper_l[-1] * right
        sol = _thomas(lower_l, diag_l, upper_l, rhs, stack)
        if not (lib.isfinite(sol).all()):
            raise FloatingPointError("singular implicit system")
        ones = lib.ones(batch + (1,), dtype=sol.dtype) if is_torch else np.ones(batch + (1,))
        rows.append(lib.cat([ones * left, sol, ones * right], -1) if is_torch
                    else np.concatenate([ones * left, sol, ones * right], -1))
        prev = [sol[..., i] for i in range(grid.n)]
    return stack(rows, -2)


def dlvs_to_calls(surface: DlvSurface) -> CallSurface:
    if np.any(surface.dlvs <= 0):
        raise ValueError("DLVs must be positive")
    return CallSurface(surface.grid, prices_from_dlvs(surface.dlvs, surface.grid))


@dataclass
class FitConfig:
    max_iterations: int = 200
    tol: float = 1e-10            # stop when the objective improves by less than this
    init: str | float = "direct"  # "direct" slice-wise inversion, or a flat DLV level
    damping: float = 1e-3
    max_step: float = 2.0         # cap on a single step in squashed coordinates


@dataclass
class FitResult:
    surface: DlvSurface
    objective: float
    iterations: int


def _squash(theta, lo, hi):
    return lo + (hi - lo) * torch.sigmoid(theta)


def _unsquash(sig, lo, hi):
    p = np.clip((np.asarray(sig) - lo) / (hi - lo), 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


def direct_inversion(market_prices, grid: StrikeGrid, bounds=(SIGMA_LOW, SIGMA_HIGH)) -> np.ndarray:
    """Slice-by-slice starting point for the fitter.

    Each maturity inverts the DLV formula against the already re-priced
    previous slice; nodes with negative gamma or calendar spread are clipped
    into the bounds. Exact for arbitrage-free input.
    """
    lo, hi = bounds
    mk = np.asarray(market_prices, dtype=float)
    x = grid.interior
    sig = np.empty(mk.shape[:-2] + grid.shape)
    prev = np.broadcast_to(intrinsic_prices(grid), mk[..., 0, :].shape).copy()
    prev[..., 0] = 1.0 - grid.x[0]
    for j in range(grid.m):
        row = mk[..., j, :]
        delta = np.diff(row, axis=-1) / np.diff(grid.x)
        gamma = np.diff(delta, axis=-1) / (0.5 * (grid.x[2:] - grid.x[:-2]))
        theta = (row - prev)[..., 1:-1]
        denom = 0.5 * gamma * x ** 2 * grid.dtaus[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.sqrt(np.maximum(theta, 0.0) / denom)
        s = np.where(theta <= 0, lo, np.where(denom <= 0, hi, s))
        sig[..., j, :] = np.clip(np.nan_to_num(s, nan=lo), lo, hi)
        prev = _step_slice(sig[..., j, :], prev, grid, j)
    return sig


def _step_slice(sig_row, prev_row, grid: StrikeGrid, j: int):
    """One implicit step from ``prev_row`` (full row incl. boundaries) with DLVs ``sig_row``."""
    lower, diag, upper = _tridiagonal_coefficients(sig_row, grid, j, np)
    n = grid.n
    left = 1.0 - grid.x[0]
    rhs = [prev_row[..., i + 1] for i in range(n)]
    rhs[0] = rhs[0] - lower[..., 0] * left
    sol = _thomas([lower[..., i] for i in range(n)], [diag[..., i] for i in range(n)],
                  [upper[..., i] for i in range(n)], rhs, np.stack)
    ones = np.ones(sol.shape[:-1] + (1,))
    return np.concatenate([ones * left, sol, ones * 0.0], -1)


def fit_objective(theta: torch.Tensor, market: torch.Tensor, grid: StrikeGrid, bounds) -> torch.Tensor:
    """Mean squared price error over interior nodes, one value per surface."""
    C = prices_from_dlvs(_squash(theta, *bounds), grid)
    return ((C - market)[..., 1:-1] ** 2).mean(dim=(-2, -1))


def fit_arbitrage_free_batch(market_prices, grid: StrikeGrid, bounds=(SIGMA_LOW, SIGMA_HIGH),
                             config: FitConfig | None = None, init=None):
    """Fit DLVs to a batch of market grids ``(B, m, n+2)``.

    Each surface is an independent least-squares problem in the squashed DLV
    parameters, solved by Levenberg-Marquardt with the residual Jacobian taken
    from reverse-mode differentiation through the tridiagonal solves.
    Returns ``(dlvs, objectives, iterations)``.
    """
    config = config or FitConfig()
    mk = np.asarray(market_prices, dtype=float)
    if mk.ndim == 2:
        mk = mk[None]
    if not np.all(np.isfinite(mk)):
        raise ValueError("non-finite market prices")
    if mk.shape[1:] != (grid.m, grid.n + 2):
        raise ValueError(f"market array shape {mk.shape} does not match grid")
    B = mk.shape[0]
    lo, hi = bounds
    market = torch.as_tensor(mk)
    if init is not None:
        start = np.asarray(init, dtype=float)
    elif config.init == "direct":
        start = direct_inversion(mk, grid, bounds)
    else:
        start = np.full((B,) + grid.shape, float(config.init))
    pad = 1e-6 * (hi - lo)
    start = np.clip(start, lo + pad, hi - pad)
    theta = torch.as_tensor(_unsquash(start, lo, hi)).reshape(B, -1).clone()
    n_par = theta.shape[1]
    eye = torch.eye(n_par, dtype=nn.DTYPE)

    def residuals(th, rows):
        C = prices_from_dlvs(_squash(th.reshape((-1,) + grid.shape), lo, hi), grid)
        return (C - market[rows])[..., 1:-1].reshape(th.shape[0], -1)

    with torch.no_grad():
        current = (residuals(theta, torch.arange(B)) ** 2).mean(-1)
    lam = torch.full((B,), config.damping, dtype=nn.DTYPE)
    active = torch.ones(B, dtype=torch.bool)
    iterations = 0
    while iterations < config.max_iterations and active.any():
        iterations += 1
        idx = torch.nonzero(active).flatten()
        th = theta[idx].clone().requires_grad_(True)
        r = residuals(th, idx)
        J = nn.batch_jacobian(r, th)
        r = r.detach()
        JtJ = J.transpose(1, 2) @ J
        Jtr = (J.transpose(1, 2) @ r[..., None])[..., 0]
        scale = torch.diagonal(JtJ, dim1=1, dim2=2)[:, None, :] * eye + 1e-14 * eye
        pending = torch.ones(len(idx), dtype=torch.bool)
        for _ in range(10):
            A = JtJ + lam[idx][:, None, None] * scale
            step = torch.linalg.solve(A, -Jtr)
            big = step.abs().amax(-1, keepdim=True)
            step = step * torch.clamp(config.max_step / big, max=1.0)
            cand = theta[idx] + step
            with torch.no_grad():
                new = (residuals(cand, idx) ** 2).mean(-1)
            accept = pending & (new <= current[idx])
            if accept.any():
                sel = idx[accept]
                gain = current[sel] - new[accept]
                theta[sel] = cand[accept]
                current[sel] = new[accept]
                lam[sel] = torch.clamp(lam[sel] * 0.3, min=1e-12)
                active[sel[gain < config.tol]] = False
            pending &= ~accept
            if not pending.any():
                break
            lam[idx[pending]] *= 10.0
        # no improving step at any damping: converged to working precision
        active[idx[pending]] = False
    sig = _squash(theta.reshape((B,) + grid.shape), lo, hi).detach().numpy()
    return sig, current.numpy(), iterations


def fit_arbitrage_free(market: CallSurface, bounds=(SIGMA_LOW, SIGMA_HIGH), config: FitConfig | None = None) -> FitResult:
    """Closest arbitrage-free surface (in mean squared price) to ``market``."""
    sig, objective, iters = fit_arbitrage_free_batch(market.prices, market.grid, bounds, config)
    return FitResult(DlvSurface(market.grid, sig[0], tuple(bounds)), float(objective[0]), iters)
