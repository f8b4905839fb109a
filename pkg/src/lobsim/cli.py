"""Operator entry point: preprocess -> train -> simulate -> evaluate -> impact.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Every command writes a manifest embedding the configuration and input content
hashes so reported numbers are traceable to exact inputs.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .book import MISSING
from .config import ConfigError, RunConfig, load_config
from .data import ParseError, WindowDataset, filter_events, parse_message_file, train_val_split
from .evaluation import (
    InsufficientData,
    impact_curve,
    pca_coverage,
    predictive_score,
    stylized_facts,
)
from .model import ModelBundle
from .sim import (
    POVAgent,
    SimConfig,
    SimOutput,
    SimulationError,
    checkpoint_hash,
    run_simulation,
    write_run,
)
from .training import train as train_model

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(config_path, seed=None) -> RunConfig:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if seed is not None:
        cfg.seed = seed
        cfg.apply_seed()
    return cfg


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _events(cfg: RunConfig):
    path = Path(cfg.data.message_file)
    if not path.exists():
        _fail(EXIT_DATA, f"message file not found: {path}")
    try:
        return filter_events(parse_message_file(path))
    except ParseError as exc:
        _fail(EXIT_DATA, str(exc))


@click.group()
def main():
    """Diffusion-driven limit order book market simulator."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
def preprocess(config_path, out_dir, seed):
    """Parse, feature-engineer, normalize, and window a session into a cache."""
    cfg = _load(config_path, seed)
    events = _events(cfg)
    try:
        train_ds, val_ds = train_val_split(
            events, window=cfg.data.window,
            train_fraction=cfg.data.train_fraction, levels=cfg.data.levels,
        )
    except data_mod.DegenerateFeature as exc:
        _fail(EXIT_DATA, f"degenerate feature: {exc}")
    except ValueError as exc:
        _fail(EXIT_DATA, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds.save(out / "train.npz")
    val_ds.save(out / "val.npz")
    train_ds.stats.save(out / "norm_stats.json")
    manifest = {
        "config": str(config_path),
        "message_file_hash": _file_hash(cfg.data.message_file),
        "events": len(events),
        "train_windows": len(train_ds),
        "val_windows": len(val_ds),
        "cache_hash": _file_hash(out / "train.npz"),
    }
    (out / "preprocess_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    click.echo(
        f"events: {len(events)}  train windows: {len(train_ds)}  val windows: {len(val_ds)}"
    )
    click.echo(f"cache hash: {manifest['cache_hash']}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--cache", "cache_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
def train(config_path, cache_dir, out_dir, seed):
    """Train the order denoiser; saves the best-validation checkpoint."""
    cfg = _load(config_path, seed)
    cache = Path(cache_dir)
    for name in ("train.npz", "val.npz"):
        if not (cache / name).exists():
            _fail(EXIT_DATA, f"missing cache file: {cache / name}")
    train_ds = WindowDataset.load(cache / "train.npz")
    val_ds = WindowDataset.load(cache / "val.npz")
    try:
        result = train_model(train_ds, val_ds, cfg.model, cfg.train, log=click.echo)
    except ValueError as exc:
        _fail(EXIT_DATA, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    result.bundle.save(ckpt)
    manifest = {
        "model": asdict(cfg.model),
        "train": asdict(cfg.train),
        "best_val_loss": result.best_val_loss,
        "epochs": len(result.history),
        "cache_hash": _file_hash(cache / "train.npz"),
        "checkpoint_hash": checkpoint_hash(ckpt),
        "parameters": result.bundle.model.parameter_count(),
    }
    (out / "train_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    click.echo(f"best validation loss: {result.best_val_loss:.4f}")
    click.echo(f"checkpoint: {ckpt}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--sampler", type=click.Choice(["ddpm", "ddim"]), default=None)
@click.option("--steps", type=int, default=None, help="DDIM sampling steps")
@click.option("--pov", type=click.Choice(["on", "off"]), default="off")
@click.option("--replay-only", is_flag=True, help="Pure market replay, no world agent")
def simulate(config_path, checkpoint, out_dir, seed, sampler, steps, pov, replay_only):
    """Run one simulation session; writes the 50-column CSV and a manifest."""
    cfg = _load(config_path, seed)
    if sampler is not None:
        cfg.sim.sampler = sampler
    if steps is not None:
        cfg.sim.ddim_sampling_steps = steps
    if not replay_only and checkpoint is None:
        _fail(EXIT_CONFIG, "--checkpoint is required unless --replay-only is set")
    events = _events(cfg)
    bundle = None
    if not replay_only:
        if not Path(checkpoint).exists():
            _fail(EXIT_DATA, f"checkpoint not found: {checkpoint}")
        bundle = ModelBundle.load(checkpoint)
    pov_agent = POVAgent(cfg.pov) if pov == "on" else None
    try:
        output = run_simulation(cfg.sim, events, bundle, pov_agent, replay_only=replay_only)
    except SimulationError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    extra = {"message_file_hash": _file_hash(cfg.data.message_file)}
    if bundle is not None:
        extra["checkpoint_hash"] = checkpoint_hash(checkpoint)
    write_run(output, out_dir, "simulation", extra)
    click.echo(f"rows: {len(output.rows)}  columns: 50  model calls: {output.n_model_calls}")


def read_sim_csv(path) -> SimOutput:
    """Load a 50-column run CSV back into a SimOutput; event times are
    reconstructed by accumulating the offset column."""
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.rstrip("\n").split(",")
            if len(parts) != 50:
                raise ParseError(path, len(rows) + 1, f"expected 50 columns, got {len(parts)}")
            rows.append(tuple(float(p) for p in parts))
    offsets = np.array([r[4] for r in rows])
    out = SimOutput(rows, SimConfig())
    out.event_times = list(np.cumsum(offsets))
    return out


@main.command()
@click.option("--sim-csv", required=True, type=click.Path())
@click.option("--real-csv", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--predictor-epochs", type=int, default=None,
              help="Cap forecaster epochs (desk-scale runs)")
def evaluate(sim_csv, real_csv, out_dir, seed, predictor_epochs):
    """Predictive score, stylized facts, and PCA coverage for a run."""
    from .evaluation import PredictiveScoreConfig

    for p in (sim_csv, real_csv):
        if not Path(p).exists():
            _fail(EXIT_DATA, f"file not found: {p}")
    try:
        sim = read_sim_csv(sim_csv)
        real = read_sim_csv(real_csv)
    except ParseError as exc:
        _fail(EXIT_DATA, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PredictiveScoreConfig(seed=seed)
    if predictor_epochs is not None:
        cfg.max_epochs = predictor_epochs
    report = {}
    try:
        report["predictive_score"] = predictive_score(sim, real, cfg)
        report["predictive_score_real_benchmark"] = predictive_score(real, real, cfg)
    except InsufficientData as exc:
        _fail(EXIT_DATA, f"predictive score: {exc}")
    from .evaluation import observation_matrix

    try:
        report["pca_coverage_percent"] = pca_coverage(
            observation_matrix(real), observation_matrix(sim)
        )
    except InsufficientData as exc:
        report["pca_coverage_percent"] = None
        report["pca_coverage_error"] = str(exc)

    for label, run in (("sim", sim), ("real", real)):
        volumes = np.where(np.array([r[5] for r in run.rows]) == 2,
                           np.array([r[1] for r in run.rows]), 0.0)
        facts = stylized_facts(run.times(), run.mids(), volumes)
        report[f"{label}_volume_volatility_corr"] = facts.volume_volatility_corr
        report[f"{label}_returns_volatility_corr"] = facts.returns_volatility_corr
        report[f"{label}_return_kurtosis"] = facts.kurtosis
        report[f"{label}_acf_band"] = facts.acf_band
        np.savetxt(
            out / f"{label}_acf.csv",
            np.column_stack([facts.lags_minutes, facts.returns_acf, facts.squared_returns_acf]),
            delimiter=",", header="lag_minutes,returns_acf,squared_returns_acf", comments="",
        )
        np.savetxt(
            out / f"{label}_return_histogram.csv",
            np.column_stack([facts.histogram_bins[:-1], facts.histogram_counts]),
            delimiter=",", header="bin_left,count", comments="",
        )
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    click.echo(json.dumps(report, indent=2, sort_keys=True))


def _impact_worker(args):
    config_path, checkpoint, seed, pov_on, replay_only = args
    cfg = _load(config_path, seed)
    events = _events(cfg)
    bundle = ModelBundle.load(checkpoint) if not replay_only else None
    pov = POVAgent(cfg.pov) if pov_on else None
    return run_simulation(cfg.sim, events, bundle, pov, replay_only=replay_only)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seeds", type=int, default=5, help="Number of seed-paired runs")
@click.option("--replay-only", is_flag=True)
@click.option("--workers", type=int, default=1)
def impact(config_path, checkpoint, out_dir, seeds, replay_only, workers):
    """A/B market impact: seed-paired runs with and without the POV agent."""
    if not replay_only and checkpoint is None:
        _fail(EXIT_CONFIG, "--checkpoint is required unless --replay-only is set")
    jobs = [(config_path, checkpoint, s, pov_on, replay_only)
            for s in range(seeds) for pov_on in (True, False)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_impact_worker, jobs))
    else:
        results = [_impact_worker(j) for j in jobs]
    runs_with = results[0::2]
    runs_without = results[1::2]
    try:
        curve = impact_curve(runs_with, runs_without)
    except InsufficientData as exc:
        _fail(EXIT_RUNTIME, str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        out / "impact_curve.csv",
        np.column_stack([curve.bucket_times, curve.mean, curve.std]),
        delimiter=",", header="bucket_start_s,mean_impact,std_impact", comments="",
    )
    (out / "impact_manifest.json").write_text(json.dumps(
        {"seeds": seeds, "replay_only": replay_only,
         "checkpoint_hash": checkpoint_hash(checkpoint) if checkpoint else None},
        indent=2, sort_keys=True))
    click.echo(f"buckets: {len(curve.bucket_times)}  peak |impact|: {np.abs(curve.mean).max():.3e}")


if __name__ == "__main__":
    main()
