"""Configuration, market data ingestion, synthetic data and model persistence."""
from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dlv, synth
from .dlv import StrikeGrid

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class PrerequisiteError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class VersionError(ValueError):
    pass


# ---------------------------------------------------------------- config

def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(float(v)) for v in str(text).split(",") if v.strip())


@dataclass
class Config:
    maturities: tuple = (20, 40, 60, 120)
    strikes: tuple = (0.80, 0.85, 0.90, 0.95, 1.00, 1.05, 1.10, 1.15, 1.20)
    lower_strike: float = 0.5
    upper_strike: float = 1.5
    sigma_low: float = dlv.SIGMA_LOW
    sigma_high: float = dlv.SIGMA_HIGH
    latent_dim: int = 3
    p: int = 2
    train_fraction: float = 0.8
    learning_rate: float = 1e-3
    ae_iterations: int = 4000
    ae_batch: int = 256
    ae_dropout: float = 0.02
    vol_iterations: int = 1500
    vol_dropout: float = 0.1
    flow_iterations: int = 2000
    flow_dropout: float = 0.0
    patience: int = 100
    n_knots: int = 32
    n_layers: int = 1
    seed: int = 0
    days: int = 2000
    n_assets: int = 1
    cross_correlation: float = 0.5
    M: int = 4
    tau: int = 3
    retain: str = "all"
    horizon: str = "short"
    long_tau: int = 256
    long_retain: int = 4
    explosion_threshold: float = 10.0

    def __post_init__(self):
        self.maturities = _ints(self.maturities) if isinstance(self.maturities, str) else tuple(self.maturities)
        self.strikes = _floats(self.strikes) if isinstance(self.strikes, str) else tuple(self.strikes)
        if self.horizon not in ("short", "long"):
            raise ValueError("horizon must be 'short' or 'long'")
        if self.latent_dim < 1 or self.p < 1 or self.n_assets < 1:
            raise ValueError("latent_dim, p and n_assets must be positive")

    @property
    def grid(self) -> StrikeGrid:
        return StrikeGrid(self.maturities, (self.lower_strike, *self.strikes, self.upper_strike))

    @property
    def bounds(self) -> tuple:
        return (self.sigma_low, self.sigma_high)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def field_types(cls) -> dict:
        defaults = cls()
        return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict) -> "Config":
        types = cls.field_types()
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kind = types[key]
            if kind is tuple or not isinstance(raw, str):
                kwargs[key] = raw
            elif kind is bool:
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kwargs[key] = kind(float(raw)) if kind is int else kind(raw.strip())
        return cls(**kwargs)


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    values = read_config(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return Config.from_mapping(values)


# ---------------------------------------------------------------- market data

@dataclass
class AssetData:
    name: str
    dates: np.ndarray       # ISO date strings, strictly increasing
    spot: np.ndarray
    prices: np.ndarray      # (T, m, n+2)

    def __post_init__(self):
        if len(self.dates) != len(self.spot) or len(self.dates) != len(self.prices):
            raise DataError(f"{self.name}: dates, spot and surfaces differ in length")
        if np.any(self.spot <= 0) or not np.all(np.isfinite(self.spot)):
            raise DataError(f"{self.name}: spot must be positive")
        if len(self.dates) > 1 and np.any(self.dates[1:] <= self.dates[:-1]):
            raise DataError(f"{self.name}: dates must be strictly increasing")

    @property
    def returns(self) -> np.ndarray:
        """``r_t = ln s_t - ln s_{t-1}`` with ``r_0 = 0``."""
        return np.concatenate([[0.0], np.diff(np.log(self.spot))])


@dataclass
class DataBundle:
    grid: StrikeGrid
    assets: dict = field(default_factory=dict)    # name -> AssetData
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.assets):
            a = self.assets[name]
            h.update(name.encode())
            h.update("|".join(a.dates).encode())
            h.update(np.ascontiguousarray(a.spot).tobytes())
            h.update(np.ascontiguousarray(a.prices).tobytes())
        return h.hexdigest()[:16]


def business_dates(n: int, start: str = "2010-01-04") -> np.ndarray:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return days.astype(str)


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames or [], list(reader)


def _require_columns(path, have, need):
    missing = [c for c in need if c not in have]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")


def load_market_csv(spot_path, surface_path, name: str | None = None, grid: StrikeGrid | None = None) -> AssetData:
    """Parse ``date,spot`` and long-format ``date,maturity_days,strike_rel,call_price`` files.

    The grid is taken from the surface file unless given. Every date needs a
    price at every node; unsorted dates are sorted with a warning.
    """
    name = name or Path(spot_path).stem.replace("_spot", "")
    cols, rows = _read_rows(spot_path)
    _require_columns(spot_path, cols, ["date", "spot"])
    spot = {}
    for r in rows:
        d = r["date"].strip()
        if d in spot:
            raise DataError(f"{spot_path}: duplicate date {d}")
        value = float(r["spot"])
        if not value > 0:
            raise DataError(f"{spot_path}: non-positive spot {value} on {d}")
        spot[d] = value

    cols, rows = _read_rows(surface_path)
    _require_columns(surface_path, cols, ["date", "maturity_days", "strike_rel", "call_price"])
    nodes = {}
    for r in rows:
        key = (r["date"].strip(), float(r["maturity_days"]), round(float(r["strike_rel"]), 10))
        if key in nodes:
            raise DataError(f"{surface_path}: duplicate node {key}")
        nodes[key] = float(r["call_price"])
    if grid is None:
        grid = StrikeGrid(tuple(sorted({k[1] for k in nodes})), tuple(sorted({k[2] for k in nodes})))

    dates = list(spot)
    if dates != sorted(dates):
        logger.warning("%s: dates not sorted; sorting", spot_path)
        dates = sorted(dates)
    surface_dates = {k[0] for k in nodes}
    extra = surface_dates - set(dates)
    if extra:
        raise DataError(f"{surface_path}: surface dates without spot, e.g. {sorted(extra)[:3]}")
    prices = np.empty((len(dates), grid.m, grid.n + 2))
    for t, d in enumerate(dates):
        for j, mat in enumerate(grid.maturity_days):
            for i, x in enumerate(grid.strikes):
                key = (d, float(mat), round(float(x), 10))
                if key not in nodes:
                    raise DataError(f"{surface_path}: missing node on {d}: maturity {mat:g}, strike {x:g}")
                prices[t, j, i] = nodes[key]
    return AssetData(name, np.asarray(dates), np.asarray([spot[d] for d in dates]), prices)


def save_market_csv(asset: AssetData, grid: StrikeGrid, spot_path, surface_path):
    with open(spot_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "spot"])
        for d, s in zip(asset.dates, asset.spot):
            w.writerow([d, repr(float(s))])
    write_surface_csv(surface_path, asset.dates, asset.prices, grid, "call_price")


def write_surface_csv(path, dates, values, grid: StrikeGrid, column: str, strikes=None):
    strikes = grid.strikes if strikes is None else strikes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "maturity_days", "strike_rel", column])
        for d, surf in zip(dates, values):
            for j, mat in enumerate(grid.maturity_days):
                for i, x in enumerate(strikes):
                    w.writerow([d, f"{mat:g}", f"{x:.10g}", repr(float(surf[j, i]))])


def read_dlv_csv(path, grid: StrikeGrid):
    cols, rows = _read_rows(path)
    _require_columns(path, cols, ["date", "maturity_days", "strike_rel", "dlv"])
    dates = sorted({r["date"] for r in rows})
    pos = {d: t for t, d in enumerate(dates)}
    jx = {float(m): j for j, m in enumerate(grid.maturity_days)}
    ix = {round(float(x), 10): i for i, x in enumerate(grid.interior)}
    out = np.full((len(dates), grid.m, grid.n), np.nan)
    for r in rows:
        out[pos[r["date"]], jx[float(r["maturity_days"])], ix[round(float(r["strike_rel"]), 10)]] = float(r["dlv"])
    if np.isnan(out).any():
        raise DataError(f"{path}: incomplete DLV grid")
    return np.asarray(dates), out


def synth_generate(config: Config, seed: int | None = None, params: synth.SynthParams | None = None) -> DataBundle:
    """Synthetic stochastic-volatility market with arbitrage-free call grids for every asset."""
    seed = config.seed if seed is None else seed
    params = params or synth.SynthParams(days=config.days, cross_correlation=config.cross_correlation)
    grid = config.grid
    factors = synth.simulate_factors(params, config.n_assets, seed)
    dates = business_dates(params.days)
    bundle = DataBundle(grid, meta={"seed": seed, "params": dataclasses.asdict(params)})
    for k, f in enumerate(factors):
        spot, prices, _, objective = synth.market_from_factors(grid, f, params, config.bounds)
        name = f"asset{k}"
        bundle.assets[name] = AssetData(name, dates.copy(), spot, prices)
        bundle.meta[f"{name}_fit_rmse_max"] = float(np.sqrt(objective.max()))
    return bundle


# ---------------------------------------------------------------- persistence

def _encode(obj):
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        return {"__ndarray__": base64.b64encode(arr.tobytes()).decode("ascii"),
                "dtype": arr.dtype.str, "shape": list(arr.shape)}
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            try:
                raw = base64.b64decode(obj["__ndarray__"], validate=True)
                return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
            except (ValueError, TypeError) as exc:
                raise DataError(f"corrupt array payload: {exc}") from exc
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


@dataclass
class ModelArtifact:
    stages: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


def save_model(artifact: ModelArtifact, path):
    payload = {"schema_version": artifact.schema_version, "config": _encode(artifact.config),
               "fingerprints": artifact.fingerprints, "stages": _encode(artifact.stages)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload))


def load_model(path, data_fingerprint: str | None = None) -> ModelArtifact:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt model file: {exc}") from exc
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    art = ModelArtifact(_decode(payload["stages"]), _decode(payload["config"]), payload.get("fingerprints", {}),
                        version)
    if data_fingerprint is not None and art.fingerprints.get("data") not in (None, data_fingerprint):
        logger.warning("%s was fitted on data %s, evaluating against %s", path, art.fingerprints.get("data"),
                       data_fingerprint)
    return art
