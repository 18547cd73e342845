"""Command-line surface chaining the pipeline stages.

Every subcommand reads defaults from an optional YAML config file
(--config), overridable per-flag; --seed and --out are accepted
everywhere. Outputs are plain text (key=value) plus machine-readable
records suitable for external plotting.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .retrieval import embed_sequences, load_bank
from .synth import synthetic_city, write_porto_csv
from .tokenizer import read_token_sequences
from .training import finite_difference_check, load_checkpoint
from .vocab import load_vocabulary


def _load_config(config_path, seed, out_dir, **overrides) -> pl.RunConfig:
    cfg = pl.RunConfig.from_yaml(config_path) if config_path else pl.RunConfig()
    updates = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        updates["seed"] = seed
    if out_dir is not None:
        updates["out_dir"] = str(out_dir)
    return replace(cfg, **updates) if updates else cfg


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                      help="YAML config file with RunConfig keys.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the run seed.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None,
                      help="Run output directory.")(fn)
    return fn


@click.group()
def main():
    """Trajectory tokenization, masked pretraining, and retrieval evaluation."""


@main.command()
@_common
@click.option("--csv", "csv_path", type=click.Path(exists=True), required=True)
def ingest(config_path, seed, out_dir, csv_path):
    """Parse a Porto-schema CSV into the trajectory store."""
    cfg = _load_config(config_path, seed, out_dir, csv_path=str(csv_path))
    pl.run_pipeline(cfg, until="ingest", log=click.echo)
    click.echo((Path(cfg.out_dir) / "ingest_stats.txt").read_text(), nl=False)


@main.command("split-stats")
@_common
def split_stats(config_path, seed, out_dir):
    """Deterministic 60/20/20 split and its empirical proportions."""
    cfg = _load_config(config_path, seed, out_dir)
    pl.run_pipeline(cfg, until="split", log=click.echo)
    click.echo((Path(cfg.out_dir) / "split_stats.txt").read_text(), nl=False)


@main.command("build-vocab")
@_common
@click.option("--capacity", type=int, default=None)
def build_vocab(config_path, seed, out_dir, capacity):
    """Build the density-adaptive vocabulary from the training split."""
    cfg = _load_config(config_path, seed, out_dir, capacity=capacity)
    pl.run_pipeline(cfg, until="vocab", log=click.echo)
    vocabulary = load_vocabulary(Path(cfg.out_dir) / "vocab.txt")
    click.echo(f"entries={len(vocabulary.entries)}")
    click.echo(f"num_tokens={vocabulary.num_tokens}")


@main.command()
@_common
def tokenize(config_path, seed, out_dir):
    """Tokenize all splits against the built vocabulary."""
    cfg = _load_config(config_path, seed, out_dir)
    pl.run_pipeline(cfg, until="tokenize", log=click.echo)
    click.echo(f"v_max={pl.read_v_max(cfg.out_dir)!r}")


@main.command("mask-stats")
@_common
def mask_stats(config_path, seed, out_dir):
    """Masking statistics over the training token store."""
    cfg = _load_config(config_path, seed, out_dir)
    pl.run_pipeline(cfg, until="mask_stats", log=click.echo)
    click.echo((Path(cfg.out_dir) / "mask_stats.txt").read_text(), nl=False)


@main.command()
@_common
@click.option("--steps", type=int, default=None)
def pretrain(config_path, seed, out_dir, steps):
    """Run masked pretraining; writes checkpoint.bin and loss_trace.txt."""
    cfg = _load_config(config_path, seed, out_dir, steps=steps)
    pl.run_pipeline(cfg, until="pretrain", log=click.echo)
    trace = (Path(cfg.out_dir) / "loss_trace.txt").read_text().splitlines()
    click.echo(trace[-1])


@main.command()
@_common
@click.option("--n-coords", type=int, default=20, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
def gradcheck(config_path, seed, out_dir, n_coords, eps, tolerance):
    """Finite-difference validation of analytic gradients on a toy batch."""
    cfg = _load_config(config_path, seed, out_dir)
    from .testutil import toy_model_and_batch

    model, batch = toy_model_and_batch(seed=cfg.seed)
    report = finite_difference_check(
        model, batch, cfg.loss_weights(), n_coords=n_coords, eps=eps, seed=cfg.seed
    )
    worst = max(report.values())
    for name in sorted(report):
        click.echo(f"{name}\t{report[name]:.3e}")
    click.echo(f"worst_rel_err={worst:.3e} tolerance={tolerance:.1e}")
    if worst > tolerance:
        click.echo("FAIL")
        sys.exit(1)
    click.echo("PASS")


@main.command()
@_common
@click.option("--tokens", "tokens_path", type=click.Path(exists=True), required=True,
              help="Token store to embed.")
@click.option("--output", type=click.Path(), required=True, help="Output .npy path.")
def embed(config_path, seed, out_dir, tokens_path, output):
    """Embed a token store with the pretrained encoder (zero-shot)."""
    cfg = _load_config(config_path, seed, out_dir)
    model, _ = load_checkpoint(Path(cfg.out_dir) / "checkpoint.bin")
    seqs = read_token_sequences(tokens_path, backend=cfg.backend)
    emb = embed_sequences(model, seqs, pl.read_v_max(cfg.out_dir), pooling=cfg.pooling)
    np.save(output, emb)
    click.echo(f"embedded={emb.shape[0]} dim={emb.shape[1]} -> {output}")


@main.command()
@_common
def bank(config_path, seed, out_dir):
    """Build the DTW-grounded retrieval bank from the test split."""
    cfg = _load_config(config_path, seed, out_dir)
    pl.run_pipeline(cfg, until="bank", log=click.echo)
    b = load_bank(Path(cfg.out_dir) / "bank.txt")
    click.echo(f"n_q={len(b.query_ids)} n_c={len(b.corpus_ids)}")


@main.command("eval-sim")
@_common
def eval_sim(config_path, seed, out_dir):
    """Zero-shot similarity retrieval metrics against the DTW bank."""
    cfg = _load_config(config_path, seed, out_dir)
    pl.run_pipeline(cfg, until="evaluate", log=click.echo)
    click.echo((Path(cfg.out_dir) / "metrics.txt").read_text(), nl=False)


@main.command()
@_common
@click.option("--interval", type=int, default=None, help="Checkpoint interval in steps.")
def trace(config_path, seed, out_dir, interval):
    """Loss-vs-transfer trace: held-out masked loss and HR@10 per interval."""
    overrides = {"trace_interval": interval} if interval is not None else {}
    cfg = _load_config(config_path, seed, out_dir, **overrides)
    out_path = Path(cfg.out_dir) / "trace_transfer.txt"
    rows = pl.loss_transfer_trace(cfg, out_path=out_path)
    click.echo(f"rows={len(rows)} -> {out_path}")
    for step, val_loss, hr10 in rows:
        click.echo(f"step={step} val_loss={val_loss:.6f} hr_at_10={hr10:.4f}")


@main.command("synth-data")
@_common
@click.option("--n", "n_traj", type=int, default=500, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(), required=True)
def synth_data(config_path, seed, out_dir, n_traj, csv_path):
    """Generate the synthetic city fixture as a Porto-schema CSV."""
    cfg = _load_config(config_path, seed, out_dir)
    trajs = synthetic_city(n_traj, seed=cfg.seed)
    write_porto_csv(trajs, csv_path, seed=cfg.seed)
    click.echo(f"wrote {n_traj} trajectories -> {csv_path}")


@main.command()
@_common
@click.option("--force", is_flag=True, help="Rebuild all stages.")
def run(config_path, seed, out_dir, force):
    """Run the full pipeline end to end."""
    cfg = _load_config(config_path, seed, out_dir)
    status = pl.run_pipeline(cfg, force=force, log=click.echo)
    click.echo(json.dumps(status, sort_keys=True))


if __name__ == "__main__":
    main()
