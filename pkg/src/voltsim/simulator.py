"""Single-asset market simulator: martingale spot map plus a conditional flow over DLV codes.

A market state is ``x_t = (r_t, code_t)`` where ``code_t`` is the
standard-scaled autoencoder code of the day's DLV grid. The lagged window
``y_t = (x_t, ..., x_{t-p+1})`` (most recent first) is standard scaled per
component before it reaches either network. One step maps standard normal
noise ``z`` to the next state:

    nu = exp(F(y)),   r = z_1 * nu - nu**2 / 2,   code = T_sigma(z_2:d; y)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import compression, dlv, flow, nn

logger = logging.getLogger(__name__)

EXPLOSION_THRESHOLD = 10.0
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class MarketState:
    r: float
    sigma_code: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.r], np.asarray(self.sigma_code, dtype=float)])


@dataclass(frozen=True)
class LaggedState:
    states: tuple   # MarketState, most recent first

    def __post_init__(self):
        if len(self.states) < 1:
            raise ValueError("lag window needs at least one state")

    @property
    def p(self) -> int:
        return len(self.states)

    def flatten(self) -> np.ndarray:
        return np.concatenate([s.vector() for s in self.states])


def lag_windows(states, p: int) -> np.ndarray:
    """Windows ``y_t`` for ``t = p-1 .. T-1`` as ``(T-p+1, p*d)``, most recent state first."""
    states = np.asarray(states, dtype=float)
    T = states.shape[0]
    if T < p:
        raise ValueError(f"need at least p={p} states, got {T}")
    return np.concatenate([states[p - 1 - k:T - k] for k in range(p)], axis=1)


def training_pairs(states, p: int):
    """``(y_t, x_{t+1})`` for every ``t`` with a full window and a successor."""
    states = np.asarray(states, dtype=float)
    if states.shape[0] <= p:
        raise ValueError(f"series length must exceed p={p}")
    return lag_windows(states, p)[:-1], states[p:]


@dataclass
class SimulatorModel:
    vol_net: nn.DenseNet
    sigma_flow: flow.FlowStack
    code_scaler: compression.Scaler      # raw AE codes -> state codes
    state_scaler: compression.Scaler     # states -> network inputs and explosion check
    p: int = 2
    ae: compression.Autoencoder | None = None
    dlv_scaler: compression.Scaler | None = None
    grid: dlv.StrikeGrid | None = None
    bounds: tuple = (dlv.SIGMA_LOW, dlv.SIGMA_HIGH)
    meta: dict = field(default_factory=dict)
    code_increments: bool = False       # flow models code_{t+1} - code_t rather than code_{t+1}

    def __post_init__(self):
        if self.vol_net.n_in != self.p * self.d or self.vol_net.n_out != 1:
            raise nn.ShapeError("vol net must map p*d inputs to one output")
        if self.sigma_flow.cond_dim != self.p * self.d:
            raise nn.ShapeError("flow condition size must equal p*d")

    @property
    def d(self) -> int:
        return self.sigma_flow.dim + 1

    def condition(self, y) -> torch.Tensor:
        """Standard-scaled flattened lag window(s)."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.p * self.d:
            raise nn.ShapeError(f"lag window has {y.shape[-1]} entries, expected {self.p * self.d}")
        scale = np.tile(self.state_scaler.std, self.p)
        shift = np.tile(self.state_scaler.mean, self.p)
        return nn.as_tensor((y - shift) / scale)

    def code_anchor(self, y) -> np.ndarray:
        """What the flow output is added to: the latest codes, or zero."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if not self.code_increments:
            return np.zeros((y.shape[0], self.d - 1))
        return y[:, 1:self.d]

    def state(self) -> dict:
        out = {"p": self.p, "bounds": list(self.bounds), "meta": dict(self.meta),
               "code_increments": self.code_increments,
               "vol_net": self.vol_net.state(), "sigma_flow": self.sigma_flow.state(),
               "code_scaler": {"mean": self.code_scaler.mean, "std": self.code_scaler.std},
               "state_scaler": {"mean": self.state_scaler.mean, "std": self.state_scaler.std}}
        if self.ae is not None:
            out["ae"] = self.ae.state()
            out["dlv_scaler"] = {"mean": self.dlv_scaler.mean, "std": self.dlv_scaler.std}
            out["grid"] = {"maturity_days": list(self.grid.maturity_days), "strikes": list(self.grid.strikes)}
        return out

    @classmethod
    def from_state(cls, st: dict) -> "SimulatorModel":
        ae = scaler = grid = None
        if "ae" in st:
            ae = compression.Autoencoder.from_state(st["ae"])
            scaler = compression.Scaler(**st["dlv_scaler"])
            grid = dlv.StrikeGrid(tuple(int(m) for m in st["grid"]["maturity_days"]),
                                  tuple(float(k) for k in st["grid"]["strikes"]))
        return cls(nn.DenseNet.from_state(st["vol_net"]), flow.FlowStack.from_state(st["sigma_flow"]),
                   compression.Scaler(**st["code_scaler"]), compression.Scaler(**st["state_scaler"]),
                   int(st["p"]), ae, scaler, grid, tuple(st["bounds"]), dict(st.get("meta", {})),
                   bool(st.get("code_increments", False)))


def _log_nu(model: SimulatorModel, cond: torch.Tensor, dropout=0.0, gen=None) -> torch.Tensor:
    return model.vol_net(cond, dropout, gen)[..., 0]


def realized_vol(model: SimulatorModel, y) -> np.ndarray | float:
    """``nu = exp(F(y)) > 0`` for one window or a batch of windows."""
    y = np.asarray(y, dtype=float)
    with torch.no_grad():
        nu = torch.exp(_log_nu(model, model.condition(np.atleast_2d(y)))).numpy()
    if not np.all(np.isfinite(nu)):
        raise FloatingPointError("non-finite realized vol")
    return float(nu[0]) if y.ndim == 1 else nu


def spot_map(z1, nu):
    """Martingale log-return ``r = z1 * nu - nu**2 / 2``, so ``E[exp(r)] = 1``."""
    z1, nu = np.asarray(z1, dtype=float), np.asarray(nu, dtype=float)
    return z1 * nu - 0.5 * nu ** 2


def gaussian_nll(log_nu: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    nu2 = torch.exp(2 * log_nu)
    return (0.5 * LOG_2PI + log_nu + (r + 0.5 * nu2) ** 2 / (2 * nu2)).mean()


def vol_nll_loss(model: SimulatorModel, y, r_next, dropout=0.0, gen=None) -> torch.Tensor:
    """Mean of ``0.5 ln(2 pi nu^2) + (r + nu^2/2)^2 / (2 nu^2)`` over the batch."""
    r = nn.as_tensor(r_next)
    if r.numel() == 0:
        raise ValueError("empty batch")
    loss = gaussian_nll(_log_nu(model, model.condition(y), dropout, gen), r)
    if not torch.isfinite(loss):
        raise nn.DivergenceError("non-finite vol NLL")
    return loss


@dataclass
class SimulatorConfig:
    p: int = 2
    vol_hidden: tuple = (64, 64, 64)
    vol_activation: str = "softplus"
    flow_hidden: tuple = (64, 64, 64)
    n_knots: int = 32
    n_layers: int = 1
    train_fraction: float = 0.8
    vol_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(
        learning_rate=1e-3, dropout_rate=0.1, max_iterations=1500, patience=100))
    flow_train: nn.TrainConfig = field(default_factory=lambda: flow.default_flow_config())
    code_increments: bool = True
    seed: int = 0


def build_states(returns, codes, code_scaler: compression.Scaler | None = None):
    """Stack ``(r_t, scaled code_t)`` rows; returns ``(states, code_scaler)``."""
    codes = np.asarray(codes, dtype=float)
    returns = np.asarray(returns, dtype=float).reshape(-1)
    if codes.shape[0] != returns.shape[0]:
        raise nn.ShapeError("returns and codes differ in length")
    code_scaler = code_scaler or compression.Scaler.fit(codes)
    return np.column_stack([returns, code_scaler.transform(codes)]), code_scaler


def _init_vol_net(cond_dim: int, hidden, activation, seed: int, log_level: float) -> nn.DenseNet:
    net = nn.DenseNet([cond_dim, *hidden, 1], activation, seed=seed, zero_last=True)
    with torch.no_grad():
        net.biases[-1].fill_(log_level)
    return net


def train_vol(model: SimulatorModel, y_train, r_train, config: nn.TrainConfig, y_test=None, r_test=None):
    """Fit ``F`` by the Gaussian NLL of next-day returns."""
    c_train, r_tr = model.condition(y_train), nn.as_tensor(r_train)
    c_test = None if y_test is None or len(y_test) == 0 else model.condition(y_test)
    r_te = None if r_test is None else nn.as_tensor(r_test)

    def loss_fn(idx, dropout, gen):
        return gaussian_nll(_log_nu(model, c_train[idx], dropout, gen), r_tr[idx])

    test_fn = None if c_test is None else (lambda: gaussian_nll(_log_nu(model, c_test), r_te))
    return nn.train_loop(model.vol_net.params, loss_fn, len(r_tr), config, test_fn)


@dataclass
class TrainingData:
    states: np.ndarray
    y: np.ndarray          # lag windows y_t
    x_next: np.ndarray     # successors x_{t+1}
    train: np.ndarray      # indices into the pairs
    test: np.ndarray


def init_simulator(returns, codes, config: SimulatorConfig | None = None, ae=None, dlv_scaler=None,
                   grid=None, bounds=(dlv.SIGMA_LOW, dlv.SIGMA_HIGH)):
    """Untrained simulator plus its training pairs and train/test split."""
    config = config or SimulatorConfig()
    states, code_scaler = build_states(returns, codes)
    state_scaler = compression.Scaler.fit(states)
    y, x_next = training_pairs(states, config.p)
    tr, te = nn.split_shuffle(len(y), config.train_fraction, config.seed)
    d = states.shape[1]
    vol_net = _init_vol_net(config.p * d, config.vol_hidden, config.vol_activation, config.seed,
                            math.log(float(np.std(x_next[tr, 0])) + 1e-12))
    sigma_flow = flow.FlowStack.build(d - 1, config.p * d, config.n_layers, config.n_knots,
                                      config.flow_hidden, seed=config.seed)
    model = SimulatorModel(vol_net, sigma_flow, code_scaler, state_scaler, config.p,
                           ae, dlv_scaler, grid, tuple(bounds), code_increments=config.code_increments)
    sigma_flow.fit_output_box(x_next[tr, 1:] - model.code_anchor(y[tr]))
    return model, TrainingData(states, y, x_next, tr, te)


def train_code_flow(model: SimulatorModel, data: TrainingData, config: nn.TrainConfig):
    """Fit the conditional code flow by maximum likelihood."""
    tr, te = data.train, data.test
    c_tr, c_te = model.condition(data.y[tr]), model.condition(data.y[te])
    target = data.x_next[:, 1:] - model.code_anchor(data.y)
    xs_tr, xs_te = nn.as_tensor(target[tr]), nn.as_tensor(target[te])

    def loss_fn(idx, dropout, gen):
        return flow.nll_loss(model.sigma_flow, xs_tr[idx], c_tr[idx], dropout, gen)

    test_fn = None if len(te) == 0 else (lambda: flow.nll_loss(model.sigma_flow, xs_te, c_te))
    return nn.train_loop(model.sigma_flow.params, loss_fn, len(tr), config, test_fn)


def fit_simulator(returns, codes, config: SimulatorConfig | None = None, ae=None, dlv_scaler=None,
                  grid=None, bounds=(dlv.SIGMA_LOW, dlv.SIGMA_HIGH)):
    """Train vol net and code flow on one asset's ``(r_t, code_t)`` history.

    Returns ``(model, histories, split)`` where ``split`` holds the train/test
    indices into the ``(y_t, x_{t+1})`` pairs.
    """
    config = config or SimulatorConfig()
    model, data = init_simulator(returns, codes, config, ae, dlv_scaler, grid, bounds)
    tr, te = data.train, data.test
    vol_hist = train_vol(model, data.y[tr], data.x_next[tr, 0], config.vol_train, data.y[te], data.x_next[te, 0])
    flow_hist = train_code_flow(model, data, config.flow_train)
    model.meta.update(vol_steps=vol_hist.steps, flow_steps=flow_hist.kept_step)
    return model, {"vol": vol_hist, "flow": flow_hist}, (tr, te)


def step(model: SimulatorModel, y, z) -> np.ndarray:
    """Next state(s) ``x = T(z; y)``; rows of ``y`` and ``z`` are paired."""
    y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
    single = z.ndim == 1
    y2, z2 = np.atleast_2d(y), np.atleast_2d(z)
    if z2.shape[-1] != model.d:
        raise nn.ShapeError(f"noise has {z2.shape[-1]} components, expected {model.d}")
    cond = model.condition(y2)
    with torch.no_grad():
        nu = torch.exp(_log_nu(model, cond)).numpy()
        code, _ = model.sigma_flow.forward_t(z2[:, 1:], cond)
    out = np.column_stack([spot_map(z2[:, 0], nu), model.code_anchor(y2) + code.numpy()])
    return out[0] if single else out


def invert_latents(model: SimulatorModel, states) -> np.ndarray:
    """Latents ``z_{t+1} = T^{-1}(x_{t+1}; y_t)`` for every step of the series, shape ``(T-p, d)``."""
    states = np.asarray(states, dtype=float)
    if not np.all(np.isfinite(states)):
        raise ValueError("non-finite states")
    y, x_next = training_pairs(states, model.p)
    cond = model.condition(y)
    with torch.no_grad():
        nu = torch.exp(_log_nu(model, cond)).numpy()
        zc, _ = model.sigma_flow.inverse_t(x_next[:, 1:] - model.code_anchor(y), cond)
    z = np.column_stack([(x_next[:, 0] + 0.5 * nu ** 2) / nu, zc.numpy()])
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite latents")
    return z


@dataclass
class PathSet:
    paths: np.ndarray          # (accepted, length, d) states
    condition_index: np.ndarray
    path_index: np.ndarray
    attempted: int
    rejected: int
    reasons: dict
    meta: dict = field(default_factory=dict)

    @property
    def accepted(self) -> int:
        return self.paths.shape[0]

    @property
    def rejection_fraction(self) -> float:
        return self.rejected / self.attempted if self.attempted else 0.0


def path_noise(seed: int, n_conditions: int, M: int, tau: int, width: int) -> np.ndarray:
    """Standard normal noise ``(C, M, tau, width)``, one independent stream per (condition, path)."""
    out = np.empty((n_conditions, M, tau, width))
    for c in range(n_conditions):
        for m in range(M):
            out[c, m] = np.random.default_rng([int(seed), c, m]).standard_normal((tau, width))
    return out


def _retain_length(retain, tau: int) -> int:
    if retain in (None, "all"):
        return tau
    if isinstance(retain, str) and retain.startswith("last_"):
        retain = int(retain[5:])
    k = int(retain)
    if not 1 <= k <= tau:
        raise ValueError("retained length must lie in [1, tau]")
    return k


def explosion_mask(model: SimulatorModel, states, threshold: float = EXPLOSION_THRESHOLD):
    """True where a state is non-finite or has a standardized component beyond ``threshold``."""
    states = np.asarray(states, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.abs(model.state_scaler.transform(states))
        return ~np.all(np.isfinite(states), -1) | np.any(scaled > threshold, -1)


def roll_paths(models, windows, noise, threshold: float = EXPLOSION_THRESHOLD):
    """Step several simulators jointly.

    ``windows[i]`` is ``(B, p*d_i)`` for model ``i``; ``noise`` is ``(B, tau, sum d_i)``
    and is routed block-wise. Returns per-model paths ``(B, tau, d_i)`` and a
    joint alive mask; a row dies as soon as any model's state explodes.
    """
    B, tau, _ = noise.shape
    offsets = np.cumsum([0] + [m.d for m in models])
    ys = [np.array(w, dtype=float) for w in windows]
    paths = [np.full((B, tau, m.d), np.nan) for m in models]
    alive = np.ones(B, dtype=bool)
    reasons = {"non_finite": 0, "threshold": 0}
    for t in range(tau):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xs, nonfinite, over = [], np.zeros(idx.size, bool), np.zeros(idx.size, bool)
        for i, m in enumerate(models):
            z = noise[idx, t, offsets[i]:offsets[i + 1]]
            with np.errstate(all="ignore"):
                try:
                    x = step(m, ys[i][idx], z)
                except (ValueError, FloatingPointError):
                    x = np.full((idx.size, m.d), np.nan)
            paths[i][idx, t] = x
            fin = np.all(np.isfinite(x), -1)
            nonfinite |= ~fin
            over |= fin & explosion_mask(m, x, threshold)
            xs.append(x)
        bad = nonfinite | over
        reasons["non_finite"] += int(nonfinite.sum())
        reasons["threshold"] += int((over & ~nonfinite).sum())
        alive[idx[bad]] = False
        good = idx[~bad]
        for i, m in enumerate(models):
            x = xs[i][~bad]
            ys[i][good] = np.concatenate([x, ys[i][good, :-m.d]], axis=1) if m.p > 1 else x
    return paths, alive, reasons


def sample_paths(model: SimulatorModel, conditions, M: int, tau: int, retain="all", seed: int = 0,
                 threshold: float = EXPLOSION_THRESHOLD, noise=None) -> PathSet:
    """Simulate ``M`` paths of ``tau`` days from each lag window in ``conditions``.

    Paths with an exploding state are rejected and counted. ``retain`` is
    ``"all"`` or ``"last_k"``/``k`` to keep only the final ``k`` days.
    """
    conditions = np.atleast_2d(np.asarray(conditions, dtype=float))
    C = conditions.shape[0]
    if M < 1 or tau < 1:
        raise ValueError("M and tau must be positive")
    keep = _retain_length(retain, tau)
    if noise is None:
        noise = path_noise(seed, C, M, tau, model.d)
    flat_noise = noise.reshape(C * M, tau, model.d)
    windows = np.repeat(conditions, M, axis=0)
    (paths,), alive, reasons = roll_paths([model], [windows], flat_noise, threshold)
    cidx, pidx = np.divmod(np.arange(C * M), M)
    ps = PathSet(paths[alive][:, tau - keep:], cidx[alive], pidx[alive], C * M, int((~alive).sum()),
                 reasons, {"M": M, "tau": tau, "retain": keep, "seed": seed})
    logger.info("sampled %d paths, rejected %d (%.2f%%)", ps.attempted, ps.rejected, 100 * ps.rejection_fraction)
    return ps


def codes_to_dlvs(model: SimulatorModel, state_codes) -> np.ndarray:
    """Scaled state codes ``(..., d-1)`` to clamped DLV grids ``(..., m, n)``."""
    if model.ae is None:
        raise ValueError("simulator has no autoencoder attached")
    raw = model.code_scaler.inverse(state_codes)
    return compression.decode_dlvs(model.ae, model.dlv_scaler, raw, model.grid, model.bounds)


def decode_paths(model: SimulatorModel, pathset: PathSet) -> np.ndarray:
    """Call-price grids ``(paths, length, m, n+2)`` for every simulated state."""
    sig = codes_to_dlvs(model, pathset.paths[..., 1:])
    return dlv.prices_from_dlvs(sig, model.grid)
