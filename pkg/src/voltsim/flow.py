"""Conditional autoregressive flows built from linear neural splines.

A layer maps ``z -> x`` one coordinate at a time: the knots of coordinate
``i`` come from a network that sees the condition and the already produced
outputs ``x_<i``. Each coordinate map is a monotone piecewise-linear spline
on an affine box with linear tails outside it, so inverse and Jacobian
determinant are exact. Layers compose without permutations, which keeps the
whole stack lower triangular.

By default only the source-side knots ``u`` are learned and the output-side
knots ``v`` are equidistant. The density at ``x`` is then a smooth function of
the parameters; when ``v`` is learned as well, data points switch bins as the
knots move and the likelihood jumps, which stalls gradient training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn

MIN_BIN_WIDTH = 1e-4
SOURCE_BOX = 5.0
BOX_INFLATION = 1.2
LOG_2PI = math.log(2 * math.pi)


@dataclass
class KnotSet:
    u: torch.Tensor   # (..., N) cumulative bin edges in (0, 1], last = 1
    v: torch.Tensor

    @property
    def slopes(self) -> torch.Tensor:
        du = torch.diff(self.u, dim=-1, prepend=torch.zeros_like(self.u[..., :1]))
        dv = torch.diff(self.v, dim=-1, prepend=torch.zeros_like(self.v[..., :1]))
        return dv / du


def _widths(raw: torch.Tensor, min_width: float) -> torch.Tensor:
    n = raw.shape[-1]
    if n * min_width >= 1:
        raise ValueError("minimum bin width too large for the knot count")
    return (1 - n * min_width) * torch.softmax(raw, -1) + min_width


def knots_from_raw(u_raw, v_raw, min_width: float = MIN_BIN_WIDTH) -> KnotSet:
    """Cumulative softmax knots, each bin mixed with a uniform floor ``min_width``."""
    u_raw, v_raw = nn.as_tensor(u_raw), nn.as_tensor(v_raw)
    if not (torch.isfinite(u_raw).all() and torch.isfinite(v_raw).all()):
        raise ValueError("non-finite raw knot values")
    u = torch.cumsum(_widths(u_raw, min_width), -1)
    v = torch.cumsum(_widths(v_raw, min_width), -1)
    return KnotSet(u / u[..., -1:], v / v[..., -1:])


def _edges(k: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.zeros_like(k[..., :1]), k], -1)


def _spline(s, src, dst):
    """Piecewise-linear map through nodes ``(src, dst)`` with linear tails; returns (t, log slope)."""
    # one knot set may serve a whole batch of points
    src = src.expand(s.shape + src.shape[-1:])
    dst = dst.expand(s.shape + dst.shape[-1:])
    S, D = _edges(src), _edges(dst)
    slopes = torch.diff(D, dim=-1) / torch.diff(S, dim=-1)
    inner = S[..., 1:-1].detach().contiguous()
    j = torch.searchsorted(inner, s.detach()[..., None].contiguous(), right=True)
    s0 = torch.gather(S, -1, j)[..., 0]
    d0 = torch.gather(D, -1, j)[..., 0]
    k = torch.gather(slopes, -1, j)[..., 0]
    return d0 + (s - s0) * k, torch.log(k)


def spline_forward(z, knots: KnotSet, box_in=(0.0, 1.0), box_out=(0.0, 1.0)):
    """Map ``z`` through the spline; returns ``(x, log_slope)``."""
    z = nn.as_tensor(z)
    a, b = box_in
    c, e = box_out
    t, ls = _spline((z - a) / (b - a), knots.u, knots.v)
    return c + t * (e - c), ls + math.log(e - c) - math.log(b - a)


def spline_inverse(x, knots: KnotSet, box_in=(0.0, 1.0), box_out=(0.0, 1.0)):
    """Exact inverse of :func:`spline_forward`; returns ``(z, log_slope of the inverse)``."""
    x = nn.as_tensor(x)
    a, b = box_in
    c, e = box_out
    s, ls = _spline((x - c) / (e - c), knots.v, knots.u)
    return a + s * (b - a), ls + math.log(b - a) - math.log(e - c)


class ConditionalSpline:
    """One autoregressive layer: a knot network per output coordinate."""

    def __init__(self, dim: int, cond_dim: int, n_knots: int = 32, hidden=(64, 64, 64),
                 activation: str = "softplus", seed: int = 0, box_in=None, box_out=None,
                 nets=None, zero_last: bool = True, learn_v: bool = False):
        self.dim, self.cond_dim, self.n_knots = int(dim), int(cond_dim), int(n_knots)
        self.learn_v = bool(learn_v)
        if self.dim < 1 or self.cond_dim < 0 or self.n_knots < 2:
            raise ValueError("invalid flow layer dimensions")
        n_raw = (2 if self.learn_v else 1) * self.n_knots
        if nets is None:
            nets = [nn.DenseNet([max(cond_dim + i, 1), *hidden, n_raw], activation,
                                seed=seed * 1009 + i, zero_last=zero_last) for i in range(dim)]
        if len(nets) != self.dim or any(net.n_out != n_raw for net in nets):
            raise nn.ShapeError("knot networks do not match the layer layout")
        self.nets = nets
        default = (-SOURCE_BOX * np.ones(dim), SOURCE_BOX * np.ones(dim))
        self.box_in = tuple(np.asarray(v, dtype=float) for v in (box_in or default))
        self.box_out = tuple(np.asarray(v, dtype=float) for v in (box_out or default))

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    def _raw(self, i, cond, prefix, dropout=0.0, gen=None):
        parts = [] if cond is None else [cond]
        if i > 0:
            parts.append(prefix[:, :i])
        batch = prefix.shape[0]
        inp = torch.cat(parts, -1) if parts else torch.ones(batch, 1, dtype=nn.DTYPE)
        raw = self.nets[i](inp, dropout, gen)
        v_raw = raw[:, self.n_knots:] if self.learn_v else torch.zeros_like(raw)
        return knots_from_raw(raw[:, :self.n_knots], v_raw)

    def _boxes(self, i):
        return ((float(self.box_in[0][i]), float(self.box_in[1][i])),
                (float(self.box_out[0][i]), float(self.box_out[1][i])))

    def forward(self, z: torch.Tensor, cond: torch.Tensor | None, dropout=0.0, gen=None):
        outs, log_det = [], torch.zeros(z.shape[0], dtype=nn.DTYPE)
        for i in range(self.dim):
            prefix = torch.stack(outs, -1) if outs else z[:, :0]
            knots = self._raw(i, cond, prefix, dropout, gen)
            bi, bo = self._boxes(i)
            xi, ls = spline_forward(z[:, i], knots, bi, bo)
            outs.append(xi)
            log_det = log_det + ls
        return torch.stack(outs, -1), log_det

    def inverse(self, x: torch.Tensor, cond: torch.Tensor | None, dropout=0.0, gen=None):
        zs, log_det = [], torch.zeros(x.shape[0], dtype=nn.DTYPE)
        for i in range(self.dim):
            knots = self._raw(i, cond, x, dropout, gen)
            bi, bo = self._boxes(i)
            zi, ls = spline_inverse(x[:, i], knots, bi, bo)
            zs.append(zi)
            log_det = log_det + ls
        return torch.stack(zs, -1), log_det

    def state(self) -> dict:
        return {"dim": self.dim, "cond_dim": self.cond_dim, "n_knots": self.n_knots, "learn_v": self.learn_v,
                "box_in": [self.box_in[0], self.box_in[1]], "box_out": [self.box_out[0], self.box_out[1]],
                "nets": [net.state() for net in self.nets]}

    @classmethod
    def from_state(cls, st: dict) -> "ConditionalSpline":
        return cls(st["dim"], st["cond_dim"], st["n_knots"],
                   box_in=tuple(st["box_in"]), box_out=tuple(st["box_out"]),
                   nets=[nn.DenseNet.from_state(s) for s in st["nets"]], learn_v=st.get("learn_v", False))


@dataclass
class FlowStack:
    layers: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, dim: int, cond_dim: int, n_layers: int = 1, n_knots: int = 32,
              hidden=(64, 64, 64), seed: int = 0, zero_last: bool = True, learn_v: bool = False) -> "FlowStack":
        return cls([ConditionalSpline(dim, cond_dim, n_knots, hidden, seed=seed + 31 * k, zero_last=zero_last,
                                      learn_v=learn_v) for k in range(n_layers)])

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def cond_dim(self) -> int:
        return self.layers[0].cond_dim

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def set_output_box(self, lo, hi):
        self.layers[-1].box_out = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))

    def fit_output_box(self, data, inflation: float = BOX_INFLATION):
        """Output box = training range of each coordinate widened by ``inflation`` about its centre."""
        data = np.asarray(data, dtype=float)
        lo, hi = data.min(0), data.max(0)
        centre, half = (lo + hi) / 2, np.maximum((hi - lo) / 2, 1e-6) * inflation
        self.set_output_box(centre - half, centre + half)

    def _cond(self, cond, batch):
        if self.cond_dim == 0:
            return None
        c = nn.as_tensor(cond)
        if c.ndim == 1:
            c = c.expand(batch, -1)
        if c.shape[-1] != self.cond_dim:
            raise nn.ShapeError(f"condition has {c.shape[-1]} features, flow expects {self.cond_dim}")
        return c

    def forward_t(self, z, cond=None, dropout=0.0, gen=None):
        z = nn.as_tensor(z)
        c = self._cond(cond, z.shape[0])
        log_det = torch.zeros(z.shape[0], dtype=nn.DTYPE)
        for layer in self.layers:
            z, ld = layer.forward(z, c, dropout, gen)
            log_det = log_det + ld
        return z, log_det

    def inverse_t(self, x, cond=None, dropout=0.0, gen=None):
        x = nn.as_tensor(x)
        c = self._cond(cond, x.shape[0])
        log_det = torch.zeros(x.shape[0], dtype=nn.DTYPE)
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, c, dropout, gen)
            log_det = log_det + ld
        return x, log_det

    def log_density_t(self, x, cond=None, dropout=0.0, gen=None):
        z, ld_inv = self.inverse_t(x, cond, dropout, gen)
        return -0.5 * (z ** 2).sum(-1) - 0.5 * self.dim * LOG_2PI + ld_inv

    def state(self) -> dict:
        return {"layers": [layer.state() for layer in self.layers], "meta": dict(self.meta)}

    @classmethod
    def from_state(cls, st: dict) -> "FlowStack":
        return cls([ConditionalSpline.from_state(s) for s in st["layers"]], dict(st.get("meta", {})))


def _rows(a):
    arr = np.asarray(a, dtype=float)
    return arr[None] if arr.ndim == 1 else arr, arr.ndim == 1


def flow_forward(flow: FlowStack, z, condition=None):
    """``x = T(z; condition)`` and ``log|det J_T(z)|`` (numpy in, numpy out)."""
    z, single = _rows(z)
    with torch.no_grad():
        x, ld = flow.forward_t(z, condition)
    x, ld = x.numpy(), ld.numpy()
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("flow output exploded")
    return (x[0], float(ld[0])) if single else (x, ld)


def flow_inverse(flow: FlowStack, x, condition=None):
    """``z = T^{-1}(x; condition)`` and ``log|det J_{T^{-1}}(x)|``."""
    x, single = _rows(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite flow input")
    with torch.no_grad():
        z, ld = flow.inverse_t(x, condition)
    z, ld = z.numpy(), ld.numpy()
    return (z[0], float(ld[0])) if single else (z, ld)


def cond_log_density(flow: FlowStack, x, condition=None):
    x, single = _rows(x)
    with torch.no_grad():
        lp = flow.log_density_t(x, condition).numpy()
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite log density")
    return float(lp[0]) if single else lp


def nll_loss(flow: FlowStack, x, condition=None, dropout=0.0, gen=None) -> torch.Tensor:
    """Monte Carlo negative log-likelihood: mean of ``log|det J_T| - log p(T^{-1}(x))``."""
    x = nn.as_tensor(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    loss = -flow.log_density_t(x, condition, dropout, gen).mean()
    if not torch.isfinite(loss):
        raise nn.DivergenceError("non-finite flow NLL")
    return loss


def default_flow_config(seed: int = 0) -> nn.TrainConfig:
    return nn.TrainConfig(learning_rate=1e-3, dropout_rate=0.0, max_iterations=2000, seed=seed, patience=100,
                          stop_at_best=True)


def train_flow(x_train, cond_train=None, config: nn.TrainConfig | None = None, x_test=None, cond_test=None,
               n_layers: int = 1, n_knots: int = 32, hidden=(64, 64, 64)):
    """Fit a conditional flow by minimizing the NLL of ``x_train`` given ``cond_train``."""
    config = config or default_flow_config()
    xt = nn.as_tensor(x_train)
    if xt.ndim != 2 or xt.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-d array")
    ct = None if cond_train is None else nn.as_tensor(cond_train)
    cond_dim = 0 if ct is None else ct.shape[1]
    flow = FlowStack.build(xt.shape[1], cond_dim, n_layers, n_knots, hidden, seed=config.seed)
    flow.fit_output_box(xt.numpy())
    xs = None if x_test is None else nn.as_tensor(x_test)
    cs = None if cond_test is None else nn.as_tensor(cond_test)

    def loss_fn(idx, dropout, gen):
        return nll_loss(flow, xt[idx], None if ct is None else ct[idx], dropout, gen)

    test_fn = None if xs is None or len(xs) == 0 else (lambda: nll_loss(flow, xs, cs))
    history = nn.train_loop(flow.params, loss_fn, xt.shape[0], config, test_fn)
    flow.meta.update(steps=history.kept_step, stop_reason=history.reason)
    return flow, history
