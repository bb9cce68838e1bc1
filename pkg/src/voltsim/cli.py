"""Pipeline driver: ``voltsim <command> --config FILE [--seed N] [--out DIR] [--asset NAME]...``

Every command reads the artifacts of earlier stages from the output
directory and writes its own next to them.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import compression, copula, dlv, evaluation, nn, simulator
from .io import (Config, ModelArtifact, PrerequisiteError, load_config, load_market_csv,
                 load_model, read_dlv_csv, save_market_csv, save_model, synth_generate, write_surface_csv)

logger = logging.getLogger("voltsim")

COMMANDS = ("synth", "fit-surface", "train-ae", "train-vol", "train-flow", "extract-latents", "fit-copula",
            "simulate", "evaluate", "report")
OUT_ENV = "VOLTSIM_OUT"


class Workspace:
    def __init__(self, out, config: Config, assets=None):
        self.root = Path(out)
        self.config = config
        self._assets = list(assets) if assets else None

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise PrerequisiteError(f"missing {path.relative_to(self.root)}; run '{stage}' first")
        return path

    def manifest(self) -> dict:
        return json.loads(self.need(self.root / "data" / "manifest.json", "synth").read_text())

    @property
    def assets(self) -> list:
        names = self.manifest()["assets"]
        if self._assets:
            unknown = [a for a in self._assets if a not in names]
            if unknown:
                raise KeyError(f"unknown asset(s) {unknown}; available {names}")
            return self._assets
        return names

    def asset_data(self, name):
        return load_market_csv(self.need(self.root / "data" / f"{name}_spot.csv", "synth"),
                               self.root / "data" / f"{name}_surface.csv", name, self.config.grid)

    def dlvs(self, name):
        return read_dlv_csv(self.need(self.root / "surfaces" / f"{name}_dlv.csv", "fit-surface"), self.config.grid)

    def artifact(self, name: str, stage: str) -> ModelArtifact:
        return load_model(self.need(self.root / "models" / f"{name}.json", stage),
                          self.manifest().get("fingerprint"))

    def save(self, name: str, stages: dict, seed: int):
        art = ModelArtifact(stages, self.config.as_dict(),
                            {"data": self.manifest().get("fingerprint"), "seed": seed})
        save_model(art, self.path("models", f"{name}.json"))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=evaluation._jsonable))


def _history(h: nn.TrainHistory) -> dict:
    return {"steps": h.steps, "kept_step": h.kept_step, "reason": h.reason, "final_train": h.train[-1] if h.train else None,
            "best_test": min(h.test) if h.test else None}


# ---------------------------------------------------------------- stages

def cmd_synth(ws: Workspace, seed: int):
    bundle = synth_generate(ws.config, seed)
    for name, asset in bundle.assets.items():
        save_market_csv(asset, bundle.grid, ws.path("data", f"{name}_spot.csv"), ws.path("data", f"{name}_surface.csv"))
    _write_json(ws.path("data", "manifest.json"), {"assets": list(bundle.assets), "fingerprint": bundle.fingerprint(),
                                                   "meta": bundle.meta, "grid": list(bundle.grid.strikes)})


def cmd_fit_surface(ws: Workspace, seed: int):
    grid, bounds = ws.config.grid, ws.config.bounds
    for name in ws.assets:
        asset = ws.asset_data(name)
        ok = np.array([dlv.check_arbitrage(dlv.CallSurface(grid, p), bounds).ok for p in asset.prices])
        sig = np.empty((len(asset.prices), grid.m, grid.n))
        if ok.any():
            sig[ok] = dlv.dlvs_from_prices(asset.prices[ok], grid, bounds)
        objective = np.zeros(len(ok))
        if (~ok).any():
            logger.info("%s: fitting %d surfaces with arbitrage", name, int((~ok).sum()))
            sig[~ok], objective[~ok], _ = dlv.fit_arbitrage_free_batch(asset.prices[~ok], grid, bounds)
        write_surface_csv(ws.path("surfaces", f"{name}_dlv.csv"), asset.dates, sig, grid, "dlv", grid.interior)
        _write_json(ws.path("surfaces", f"{name}_fit.json"),
                    {"fitted_days": int((~ok).sum()), "max_rmse": float(np.sqrt(objective.max()))})


def cmd_train_ae(ws: Workspace, seed: int):
    c = ws.config
    for name in ws.assets:
        _, sig = ws.dlvs(name)
        alpha, scaler = compression.preprocess(sig)
        tr, te = nn.split_shuffle(len(alpha), c.train_fraction, seed)
        cfg = nn.TrainConfig(c.learning_rate, c.ae_dropout, c.ae_iterations, c.ae_batch, seed)
        ae, hist = compression.train_autoencoder(alpha[tr], c.latent_dim, cfg, alpha[te])
        pca = compression.pca_fit(alpha[tr], c.latent_dim)
        metrics = {"ae_test_mse": compression.reconstruction_mse(ae, alpha[te]),
                   "pca_test_mse": compression.pca_mse(pca, alpha[te]), "history": _history(hist)}
        ws.save(f"{name}_ae", {"ae": ae.state(), "dlv_scaler": {"mean": scaler.mean, "std": scaler.std},
                               "train_index": tr, "test_index": te, "metrics": metrics}, seed)


def _sim_config(c: Config, seed: int) -> simulator.SimulatorConfig:
    return simulator.SimulatorConfig(
        p=c.p, n_knots=c.n_knots, n_layers=c.n_layers, train_fraction=c.train_fraction, seed=seed,
        vol_train=nn.TrainConfig(c.learning_rate, c.vol_dropout, c.vol_iterations, "full", seed, patience=c.patience),
        flow_train=nn.TrainConfig(c.learning_rate, c.flow_dropout, c.flow_iterations, "full", seed,
                                  patience=c.patience, stop_at_best=True))


def _init_model(ws: Workspace, name: str, seed: int):
    art = ws.artifact(f"{name}_ae", "train-ae")
    ae = compression.Autoencoder.from_state(art.stages["ae"])
    scaler = compression.Scaler(**art.stages["dlv_scaler"])
    asset = ws.asset_data(name)
    _, sig = ws.dlvs(name)
    alpha, _ = compression.preprocess(sig, scaler)
    codes = compression.encode(ae, alpha)
    return simulator.init_simulator(asset.returns, codes, _sim_config(ws.config, seed), ae, scaler,
                                    ws.config.grid, ws.config.bounds)


def cmd_train_vol(ws: Workspace, seed: int):
    for name in ws.assets:
        model, data = _init_model(ws, name, seed)
        cfg = _sim_config(ws.config, seed)
        hist = simulator.train_vol(model, data.y[data.train], data.x_next[data.train, 0], cfg.vol_train,
                                   data.y[data.test], data.x_next[data.test, 0])
        ws.save(f"{name}_vol", {"vol_net": model.vol_net.state(), "history": _history(hist)}, seed)


def cmd_train_flow(ws: Workspace, seed: int):
    for name in ws.assets:
        vol = ws.artifact(f"{name}_vol", "train-vol")
        model, data = _init_model(ws, name, seed)
        model.vol_net = nn.DenseNet.from_state(vol.stages["vol_net"])
        hist = simulator.train_code_flow(model, data, _sim_config(ws.config, seed).flow_train)
        model.meta.update(vol_steps=vol.stages["history"]["steps"], flow_steps=hist.kept_step)
        ws.save(f"{name}_simulator", {"simulator": model.state(), "train_index": data.train,
                                      "test_index": data.test, "history": _history(hist)}, seed)


def _simulator(ws: Workspace, name: str):
    art = ws.artifact(f"{name}_simulator", "train-flow")
    return simulator.SimulatorModel.from_state(art.stages["simulator"]), art


def _states(ws: Workspace, model: simulator.SimulatorModel, name: str):
    asset = ws.asset_data(name)
    _, sig = ws.dlvs(name)
    alpha, _ = compression.preprocess(sig, model.dlv_scaler)
    states, _ = simulator.build_states(asset.returns, compression.encode(model.ae, alpha), model.code_scaler)
    return asset, states


def cmd_extract_latents(ws: Workspace, seed: int):
    for name in ws.assets:
        model, art = _simulator(ws, name)
        asset, states = _states(ws, model, name)
        z = simulator.invert_latents(model, states)
        split = np.full(len(z), "train", dtype=object)
        split[art.stages["test_index"]] = "test"
        with open(ws.path("latents", f"{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "split"] + [f"z{k}" for k in range(z.shape[1])])
            for d, s, row in zip(asset.dates[model.p:], split, z):
                w.writerow([d, s] + [repr(float(v)) for v in row])


def read_latents(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    dates = np.array([r[0] for r in body])
    split = np.array([r[1] for r in body])
    z = np.array([[float(v) for v in r[2:]] for r in body])
    return dates, split, z


def cmd_fit_copula(ws: Workspace, seed: int):
    names = ws.assets
    series = [read_latents(ws.need(ws.root / "latents" / f"{n}.csv", "extract-latents")) for n in names]
    joint = copula.stack_latents([s[2] for s in series], [s[0] for s in series])
    cop = copula.estimate_block_cov(joint, ws.config.p)
    cop.meta["assets"] = names
    ws.save("copula", {"copula": cop.state(), "assets": names, "dropped": joint.dropped}, seed)
    np.savetxt(ws.path("copula", "sigma.csv"), cop.covariance, delimiter=",", fmt="%.17g")


def _joint(ws: Workspace):
    names = ws.assets
    models = [_simulator(ws, n)[0] for n in names]
    cop = None
    if len(names) > 1:
        art = ws.artifact("copula", "fit-copula")
        if art.stages["assets"] != names:
            raise PrerequisiteError(f"copula was fitted on {art.stages['assets']}, not {names}; rerun 'fit-copula'")
        cop = copula.GaussianCopula.from_state(art.stages["copula"])
    return names, models, cop


def _horizon(c: Config):
    if c.horizon == "long":
        return c.long_tau, c.long_retain
    return c.tau, c.retain


def _simulate(ws: Workspace, seed: int, tau: int, retain):
    names, models, cop = _joint(ws)
    windows = []
    for name, model in zip(names, models):
        _, states = _states(ws, model, name)
        windows.append(simulator.lag_windows(states, model.p)[:-1])
    n = min(len(w) for w in windows)
    windows = [w[-n:] for w in windows]
    if cop is None:
        return names, models, [simulator.sample_paths(models[0], windows[0], ws.config.M, tau, retain, seed,
                                                      ws.config.explosion_threshold)]
    joint = copula.JointSimulator(models, cop)
    return names, models, copula.sample_joint_paths(joint, windows, ws.config.M, tau, retain, seed,
                                                    ws.config.explosion_threshold)


def cmd_simulate(ws: Workspace, seed: int):
    tau, retain = _horizon(ws.config)
    names, models, pathsets = _simulate(ws, seed, tau, retain)
    summary = {}
    for name, model, ps in zip(names, models, pathsets):
        with open(ws.path("paths", f"{name}_paths.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "path", "step", "r"] + [f"code{k}" for k in range(model.d - 1)])
            L = ps.paths.shape[1]
            for c, m, path in zip(ps.condition_index, ps.path_index, ps.paths):
                for s in range(L):
                    w.writerow([int(c), int(m), tau - L + s] + [repr(float(v)) for v in path[s]])
        summary[name] = {"attempted": ps.attempted, "rejected": ps.rejected,
                         "rejection_fraction": ps.rejection_fraction, "reasons": ps.reasons, **ps.meta}
    _write_json(ws.path("paths", "summary.json"), summary)


def _write_arrays(ws: Workspace, name: str, rep: evaluation.MetricReport):
    for key, item in rep.arrays.items():
        arr = np.atleast_1d(item["value"])
        np.savetxt(ws.path("metrics", f"{name}_arrays", f"{key}.csv"),
                   arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[:, None], delimiter=",", fmt="%.17g")


def cmd_evaluate(ws: Workspace, seed: int):
    c = ws.config
    names = ws.assets
    for name in names:
        model, art = _simulator(ws, name)
        latent_path = ws.need(ws.root / "latents" / f"{name}.csv", "extract-latents")
        _, split, z = read_latents(latent_path)
        asset, states = _states(ws, model, name)
        _, sig = ws.dlvs(name)
        rep = evaluation.MetricReport(meta={"asset": name, "seed": seed})
        # the split is shuffled, so serial correlation is only measured on the whole series
        rep.merge(evaluation.latent_report(z[split == "train"], with_acf=False), "train_")
        rep.merge(evaluation.latent_report(z[split == "test"], with_acf=False), "test_")
        rep.merge(evaluation.latent_report(z), "full_")
        rep.merge(evaluation.short_horizon_eval(model, states, c.M, c.tau, seed), "short_")
        rep.merge(evaluation.long_horizon_eval(model, states, c.M, c.long_tau, c.long_retain, seed), "long_")
        rep.merge(evaluation.stylized_facts(asset.returns[1:], sig[1:]), "hist_")
        ae_art = ws.artifact(f"{name}_ae", "train-ae")
        for k in ("ae_test_mse", "pca_test_mse"):
            rep.add(k, ae_art.stages["metrics"][k], len(ae_art.stages["test_index"]))
        (ws.path("metrics", f"{name}.json")).write_text(rep.to_json())
        _write_arrays(ws, name, rep)
    if len(names) > 1:
        names, models, pathsets = _simulate(ws, seed, c.tau, "all")
        hist_r = np.column_stack([ws.asset_data(n).returns[1:] for n in names])
        gen_r = np.column_stack([ps.paths[..., 0].ravel() for ps in pathsets])
        rep = evaluation.MetricReport(meta={"assets": names})
        rep.add("hist_return_corr", evaluation.cross_corr(hist_r), len(hist_r))
        rep.add("gen_return_corr", evaluation.cross_corr(gen_r), len(gen_r))
        rep.add("joint_rejection_fraction", pathsets[0].rejection_fraction, pathsets[0].attempted)
        ws.path("metrics", "joint.json").write_text(rep.to_json())
        _write_arrays(ws, "joint", rep)


def cmd_report(ws: Workspace, seed: int):
    summary = {}
    lines = []
    for name in ws.assets:
        rep = evaluation.MetricReport.from_json(ws.need(ws.root / "metrics" / f"{name}.json", "evaluate").read_text())
        s = {k: v["value"] for k, v in sorted(rep.scalars.items())
             if k.startswith(("train_ks_p", "test_ks_p", "full_acf1", "short_rejection", "long_rejection",
                              "ae_test", "pca_test", "hist_excess", "hist_leverage", "long_gen_std", "long_hist_std"))}
        summary[name] = s
        lines.append(f"[{name}]")
        lines += [f"  {k:28s} {v: .6g}" for k, v in s.items()]
    joint = ws.root / "metrics" / "joint.json"
    if joint.exists():
        rep = evaluation.MetricReport.from_json(joint.read_text())
        summary["joint"] = {k: np.asarray(rep.value(k)).tolist() for k in ("hist_return_corr", "gen_return_corr")}
        lines.append("[joint] historical vs generated return correlation")
        lines.append(f"  {summary['joint']['hist_return_corr']}")
        lines.append(f"  {summary['joint']['gen_return_corr']}")
    _write_json(ws.path("report", "summary.json"), summary)
    ws.path("report", "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


HANDLERS = {"synth": cmd_synth, "fit-surface": cmd_fit_surface, "train-ae": cmd_train_ae,
            "train-vol": cmd_train_vol, "train-flow": cmd_train_flow, "extract-latents": cmd_extract_latents,
            "fit-copula": cmd_fit_copula, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "report": cmd_report}


def run_pipeline(command: str, config: Config, out=None, assets=None, seed: int | None = None) -> int:
    """Run one pipeline stage; raises on failure, returns 0 on success."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    out = out or os.environ.get(OUT_ENV) or "voltsim_out"
    seed = config.seed if seed is None else seed
    ws = Workspace(out, config, assets)
    logger.info("%s (seed %d) -> %s", command, seed, out)
    HANDLERS[command](ws, seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voltsim", description="Neural market simulator for spot and DLV surfaces.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./voltsim_out)")
    ap.add_argument("--asset", action="append", help="restrict to this asset (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    group = ap.add_argument_group("config overrides")
    for f in dataclasses.fields(Config):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(Config)}
    try:
        config = load_config(args.config, overrides)
        return run_pipeline(args.command, config, args.out, args.asset)
    except (PrerequisiteError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"voltsim {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
