"""Small dense networks, reverse-mode gradients, Adam and the training loop.

Everything runs in float64 on the CPU. Gradients come from torch autograd;
the optimizer, dropout, initialization and data splitting are implemented
here so that a run is fully determined by its seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64

ACTIVATIONS = {
    "relu": torch.relu,
    "softplus": torch.nn.functional.softplus,
    "tanh": torch.tanh,
    "identity": lambda h: h,
}


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class DenseNet:
    """Fully connected network; hidden layers use ``activation``, the output is linear."""

    def __init__(self, layer_sizes: Sequence[int], activation: str = "relu",
                 seed: int = 0, weights=None, biases=None, zero_last: bool = False):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = sizes
        self.activation = activation
        if weights is None:
            gen = torch.Generator().manual_seed(int(seed))
            weights, biases = [], []
            for n_in, n_out in zip(sizes[:-1], sizes[1:]):
                bound = 1.0 / math.sqrt(n_in)
                weights.append((torch.rand(n_out, n_in, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                biases.append((torch.rand(n_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            if zero_last:
                weights[-1].zero_()
                biases[-1].zero_()
        self.weights = [as_tensor(w).clone().requires_grad_(True) for w in weights]
        self.biases = [as_tensor(b).clone().requires_grad_(True) for b in biases]
        self._check()

    def _check(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("parameter count does not match layer sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if tuple(w.shape) != expect or tuple(b.shape) != (expect[0],):
                raise ShapeError(f"layer {k}: weight {tuple(w.shape)} / bias {tuple(b.shape)}, expected {expect}")
            if not (torch.isfinite(w).all() and torch.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite parameters")

    @property
    def params(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def __call__(self, x, dropout: float = 0.0, generator: torch.Generator | None = None):
        return forward(self, x, dropout, generator)

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_sizes, self.activation,
                        weights=[w.detach() for w in self.weights],
                        biases=[b.detach() for b in self.biases])

    def state(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation,
                "weights": [w.detach().numpy().copy() for w in self.weights],
                "biases": [b.detach().numpy().copy() for b in self.biases]}

    @classmethod
    def from_state(cls, state: dict) -> "DenseNet":
        return cls(state["layer_sizes"], state["activation"],
                   weights=[np.asarray(w) for w in state["weights"]],
                   biases=[np.asarray(b) for b in state["biases"]])


def forward(net: DenseNet, x, dropout: float = 0.0, generator: torch.Generator | None = None):
    """Evaluate ``net`` on a vector or a batch of row vectors.

    With ``dropout > 0`` hidden units are zeroed with that probability and the
    survivors scaled by ``1 / (1 - dropout)``, so inference needs no rescaling.
    """
    h = as_tensor(x)
    if h.shape[-1] != net.n_in:
        raise ShapeError(f"input has {h.shape[-1]} features, network expects {net.n_in}")
    if not torch.isfinite(h).all():
        raise ValueError("non-finite network input")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    act = ACTIVATIONS[net.activation]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            h = act(h)
            if dropout > 0.0:
                keep = torch.rand(h.shape, generator=generator, dtype=DTYPE) >= dropout
                h = h * keep / (1.0 - dropout)
    return h


def grad(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Exact reverse-mode gradient of the scalar ``loss_fn()`` w.r.t. ``params``."""
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {float(loss.detach())}")
    gs = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def batch_jacobian(outputs: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Jacobian of rows ``outputs[b]`` (B, K) w.r.t. rows ``inputs[b]`` (B, P).

    Rows must be independent of each other; one batched backward pass per
    output component.
    """
    if not torch.isfinite(outputs).all():
        raise DivergenceError("non-finite outputs")
    K = outputs.shape[1]
    seeds = torch.eye(K, dtype=outputs.dtype)[:, None, :].expand(K, outputs.shape[0], K)
    (jac,) = torch.autograd.grad(outputs, inputs, seeds, is_grads_batched=True)
    return jac.permute(1, 0, 2)


@dataclass
class OptimizerState:
    learning_rate: float
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, learning_rate: float) -> "OptimizerState":
        return cls(learning_rate,
                   [torch.zeros_like(p, requires_grad=False) for p in params],
                   [torch.zeros_like(p, requires_grad=False) for p in params])


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise DivergenceError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
            m.mul_(b1).add_((1 - b1) * g)
            v.mul_(b2).add_((1 - b2) * g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.eps))


def split_shuffle(n_items: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random permutation split; the train part holds ``floor(fraction * n)`` items."""
    n = int(n_items)
    if n < 2:
        raise ValueError("need at least two items to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(train_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    dropout_rate: float = 0.0
    max_iterations: int = 1000
    batch_size: int | str = "full"
    seed: int = 0
    stop_at: int | None = None      # fixed early-stopping iteration
    patience: int | None = None     # stop when test loss has not improved for this many steps
    stop_at_best: bool = False      # with patience: fix the stop at the iteration of least test loss

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.batch_size != "full" and int(self.batch_size) <= 0:
            raise ValueError("batch_size must be positive or 'full'")


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    steps: int = 0
    reason: str = ""
    kept_step: int = 0      # iteration whose parameters were kept


def train_loop(params: Sequence[torch.Tensor],
               loss_fn: Callable[[np.ndarray, float, torch.Generator], torch.Tensor],
               n_train: int,
               config: TrainConfig,
               test_fn: Callable[[], torch.Tensor] | None = None) -> TrainHistory:
    """Run Adam on ``loss_fn(batch_indices, dropout_rate, generator)``.

    ``test_fn`` evaluates the held-out loss with dropout disabled; it is
    recorded after every step and drives the patience rule. Parameters are
    left at their values at the stopping iteration.
    """
    if n_train <= 0:
        raise ValueError("empty training set")
    params = list(params)
    gen = torch.Generator().manual_seed(int(config.seed))
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.fresh(params, config.learning_rate)
    hist = TrainHistory()
    limit = config.max_iterations if config.stop_at is None else min(config.stop_at, config.max_iterations)
    best, since_best = math.inf, 0
    snapshot, best_step = None, 0
    full = config.batch_size == "full" or int(config.batch_size) >= n_train
    all_idx = np.arange(n_train)
    for it in range(limit):
        idx = all_idx if full else rng.choice(n_train, size=int(config.batch_size), replace=False)
        holder = {}

        def closure():
            holder["loss"] = loss_fn(idx, config.dropout_rate, gen)
            return holder["loss"]

        try:
            g = grad(closure, params)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}") from exc
        adam_step(params, g, opt)
        hist.train.append(float(holder["loss"].detach()))
        hist.steps = opt.step_count
        if test_fn is not None:
            with torch.no_grad():
                tl = float(test_fn())
            if not math.isfinite(tl):
                raise DivergenceError(f"iteration {it}: non-finite test loss")
            hist.test.append(tl)
            if config.patience is not None:
                if tl < best - 1e-12:
                    best, since_best = tl, 0
                    if config.stop_at_best:
                        snapshot, best_step = [p.detach().clone() for p in params], opt.step_count
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        hist.reason = "patience"
                        break
    if snapshot is not None and hist.reason == "patience":
        with torch.no_grad():
            for p, v in zip(params, snapshot):
                p.copy_(v)
        hist.kept_step = best_step
    else:
        hist.kept_step = hist.steps
    if not hist.reason:
        hist.reason = "stop_at" if config.stop_at is not None and hist.steps == limit else "max_iterations"
    logger.debug("training stopped after %d steps (%s)", hist.steps, hist.reason)
    return hist
