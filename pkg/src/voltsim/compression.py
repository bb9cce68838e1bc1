"""Autoencoder compression of DLV grids, with a PCA baseline.

DLVs are log-transformed and standard scaled node by node before either
model sees them. Decoding goes back through exp, so any code yields
positive DLVs and therefore an arbitrage-free call surface.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import nn
from .dlv import SIGMA_HIGH, SIGMA_LOW, DlvSurface, StrikeGrid

STD_FLOOR = 1e-12


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape or np.any(self.std <= 0):
            raise ValueError("scaler needs matching shapes and positive std")

    @classmethod
    def fit(cls, data, floor: float | None = None) -> "Scaler":
        """Population mean/std per column; zero-variance columns raise unless ``floor`` is given."""
        data = np.asarray(data, dtype=float)
        mu, sd = data.mean(0), data.std(0)
        flat = sd <= STD_FLOOR
        if np.any(flat):
            if floor is None:
                raise ValueError(f"zero variance in column(s) {np.flatnonzero(flat).tolist()}")
            sd = np.where(flat, floor, sd)
        return cls(mu, sd)

    def transform(self, data):
        return (np.asarray(data, dtype=float) - self.mean) / self.std

    def inverse(self, data):
        return np.asarray(data, dtype=float) * self.std + self.mean


def _dlv_matrix(series) -> np.ndarray:
    if isinstance(series, np.ndarray):
        arr = series
    else:
        arr = np.stack([s.dlvs if isinstance(s, DlvSurface) else np.asarray(s) for s in series])
    return arr.reshape(arr.shape[0], -1)


def preprocess(series, scaler: Scaler | None = None):
    """Log-DLVs standard scaled per node. Returns ``(alpha, scaler)``."""
    flat = _dlv_matrix(series)
    if np.any(flat <= 0):
        raise ValueError("DLVs must be positive")
    logs = np.log(flat)
    scaler = scaler or Scaler.fit(logs)
    return scaler.transform(logs), scaler


def unpreprocess(alpha, scaler: Scaler, bounds=(SIGMA_LOW, SIGMA_HIGH), clamp: bool = True) -> np.ndarray:
    sig = np.exp(scaler.inverse(alpha))
    return np.clip(sig, *bounds) if clamp else sig


@dataclass
class Autoencoder:
    encoder: nn.DenseNet
    decoder: nn.DenseNet

    def __post_init__(self):
        if self.encoder.n_in != self.decoder.n_out or self.encoder.n_out != self.decoder.n_in:
            raise nn.ShapeError("encoder and decoder do not mirror each other")

    @classmethod
    def build(cls, n_nodes: int, latent_dim: int, hidden=(64, 64), activation: str = "relu", seed: int = 0):
        if not 1 <= latent_dim <= n_nodes:
            raise ValueError("latent_dim must lie in [1, number of grid nodes]")
        enc = nn.DenseNet([n_nodes, *hidden, latent_dim], activation, seed=seed)
        dec = nn.DenseNet([latent_dim, *reversed(hidden), n_nodes], activation, seed=seed + 7919)
        return cls(enc, dec)

    @property
    def latent_dim(self) -> int:
        return self.encoder.n_out

    @property
    def params(self):
        return self.encoder.params + self.decoder.params

    def reconstruct(self, alpha, dropout: float = 0.0, generator=None) -> torch.Tensor:
        code = self.encoder(alpha, dropout, generator)
        return self.decoder(code, dropout, generator)

    def state(self) -> dict:
        return {"encoder": self.encoder.state(), "decoder": self.decoder.state()}

    @classmethod
    def from_state(cls, state: dict) -> "Autoencoder":
        return cls(nn.DenseNet.from_state(state["encoder"]), nn.DenseNet.from_state(state["decoder"]))


def reconstruction_mse(ae: Autoencoder, alpha) -> float:
    with torch.no_grad():
        rec = ae.reconstruct(alpha)
    return float(((rec - nn.as_tensor(alpha)) ** 2).mean())


def default_ae_config(seed: int = 0) -> nn.TrainConfig:
    return nn.TrainConfig(learning_rate=1e-3, dropout_rate=0.02, max_iterations=4000, batch_size=256, seed=seed)


def train_autoencoder(alpha_train, latent_dim: int, config: nn.TrainConfig | None = None,
                      alpha_test=None, hidden=(64, 64)):
    """Minimize the per-node mean squared reconstruction error of ``alpha_train``."""
    config = config or default_ae_config()
    a_train = nn.as_tensor(alpha_train)
    if a_train.ndim != 2 or a_train.shape[0] == 0:
        raise ValueError("training data must be a non-empty (T, nodes) array")
    ae = Autoencoder.build(a_train.shape[1], latent_dim, hidden, seed=config.seed)
    a_test = None if alpha_test is None else nn.as_tensor(alpha_test)

    def loss_fn(idx, dropout, gen):
        batch = a_train[idx]
        return ((ae.reconstruct(batch, dropout, gen) - batch) ** 2).mean()

    test_fn = None if a_test is None or len(a_test) == 0 else (
        lambda: ((ae.reconstruct(a_test) - a_test) ** 2).mean())
    history = nn.train_loop(ae.params, loss_fn, a_train.shape[0], config, test_fn)
    return ae, history


def encode(ae: Autoencoder, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] != ae.encoder.n_in:
        raise nn.ShapeError(f"expected {ae.encoder.n_in} grid nodes, got {alpha.shape[-1]}")
    with torch.no_grad():
        return ae.encoder(alpha).numpy()


def decode_dlvs(ae: Autoencoder, scaler: Scaler, codes, grid: StrikeGrid,
                bounds=(SIGMA_LOW, SIGMA_HIGH)) -> np.ndarray:
    """Codes ``(..., latent)`` to clamped DLV arrays ``(..., m, n)``."""
    codes = np.asarray(codes, dtype=float)
    if codes.shape[-1] != ae.latent_dim:
        raise nn.ShapeError(f"code length {codes.shape[-1]} != latent dim {ae.latent_dim}")
    with torch.no_grad():
        alpha = ae.decoder(codes).numpy()
    return unpreprocess(alpha, scaler, bounds).reshape(codes.shape[:-1] + grid.shape)


def decode_to_dlvs(ae: Autoencoder, scaler: Scaler, code, grid: StrikeGrid,
                   bounds=(SIGMA_LOW, SIGMA_HIGH)) -> DlvSurface:
    return DlvSurface(grid, decode_dlvs(ae, scaler, code, grid, bounds), tuple(bounds))


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray   # (k, nodes), orthonormal rows

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def state(self) -> dict:
        return {"mean": self.mean, "components": self.components}


def pca_fit(alpha, k: int) -> PcaModel:
    alpha = np.asarray(alpha, dtype=float)
    if not 1 <= k <= alpha.shape[1]:
        raise ValueError(f"k={k} outside [1, {alpha.shape[1]}]")
    mean = alpha.mean(0)
    cov = np.cov(alpha - mean, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    return PcaModel(mean, vecs[:, order].T.copy())


def pca_project(model: PcaModel, alpha) -> np.ndarray:
    centred = np.asarray(alpha, dtype=float) - model.mean
    return model.mean + (centred @ model.components.T) @ model.components


def pca_mse(model: PcaModel, alpha) -> float:
    alpha = np.asarray(alpha, dtype=float)
    return float(((pca_project(model, alpha) - alpha) ** 2).mean())
