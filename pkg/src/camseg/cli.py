"""`camseg` command-line interface."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import RunConfig, load_config
from . import pipeline


def _cfg(config_path, seed):
    cfg = load_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg.training.seed = seed
    return cfg


@click.group()
def main():
    """Semantic-mask generation with continuous latent embeddings."""


config_opt = click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                          help="JSON run config (defaults apply when omitted)")
seed_opt = click.option("--seed", type=int, default=None, help="override the master seed")
precision_opt = click.option("--precision", type=click.Choice(["f32", "f64"]), default="f32")


@main.command("gen-data")
@config_opt
@seed_opt
@click.option("--force", is_flag=True, help="overwrite an existing dataset directory")
def gen_data(config_path, seed, force):
    """Generate the toyscapes dataset declared in the config."""
    cfg = _cfg(config_path, seed)
    manifest = pipeline.cmd_gen_data(cfg, force=force)
    click.echo(f"wrote {sum(manifest['counts'].values())} pairs to {cfg.dataset.root} "
               f"(sha256 {manifest['sha256'][:16]})")


@main.command("train-vae")
@config_opt
@seed_opt
@precision_opt
@click.option("--arm", type=click.Choice(["kl", "vq"]), default="kl")
@click.option("--out", "out_path", required=True, type=click.Path())
def train_vae(config_path, seed, precision, arm, out_path):
    """Train the autoencoder (kl or vq arm) and save its checkpoint."""
    cfg = _cfg(config_path, seed)
    log_path = str(Path(out_path).with_suffix(".loss.csv"))
    pipeline.cmd_train_vae(cfg, arm, out_path, precision=precision, log_path=log_path,
                           progress=lambda s, r, g: click.echo(f"step {s} recon {r:.5f} reg {g:.5f}"))
    click.echo(f"saved {out_path}")


@main.command("train-model")
@config_opt
@seed_opt
@precision_opt
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def train_model(config_path, seed, precision, vae_path, out_path):
    """Train the transformer + diffusion head against a frozen autoencoder."""
    cfg = _cfg(config_path, seed)
    log_path = str(Path(out_path).with_suffix(".loss.csv"))
    pipeline.cmd_train_model(cfg, vae_path, out_path, precision=precision, log_path=log_path,
                             progress=lambda s, v: click.echo(f"step {s} loss {v:.5f}"))
    click.echo(f"saved {out_path}")


@main.command("infer")
@config_opt
@seed_opt
@precision_opt
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--ar-steps", type=int, default=None,
              help="progressive unmasking passes (default: single full-mask pass)")
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True))
def infer(config_path, seed, precision, vae_path, model_path, out_dir, ar_steps, images):
    """Predict masks and semantic images for RGB inputs."""
    cfg = _cfg(config_path, seed)
    outputs = pipeline.cmd_infer(cfg, vae_path, model_path, images, out_dir,
                                 seed=cfg.training.seed, ar_steps=ar_steps, precision=precision)
    for mask_path, sem_path in outputs:
        click.echo(f"{mask_path} {sem_path}")


@main.command("eval")
@config_opt
@seed_opt
@precision_opt
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split", default="val")
@click.option("--ar-steps", type=int, default=None)
def eval_cmd(config_path, seed, precision, vae_path, model_path, out_dir, split, ar_steps):
    """Evaluate a checkpoint on a dataset split; writes the metric CSVs."""
    cfg = _cfg(config_path, seed)
    rep = pipeline.cmd_eval(cfg, vae_path, model_path, out_dir, split=split,
                            seed=cfg.training.seed, precision=precision, ar_steps=ar_steps)
    click.echo("AP " + " ".join(f"{v:.2f}" for v in rep.summary_row()))


@main.command("corrupt-sweep")
@config_opt
@seed_opt
@precision_opt
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--sweep", "sweep_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--split", default="val")
def corrupt_sweep(config_path, seed, precision, vae_path, model_path, sweep_path, out_path, split):
    """Run the corruption robustness sweep; one CSV row per condition."""
    cfg = _cfg(config_path, seed)
    rows = pipeline.cmd_corrupt_sweep(cfg, vae_path, model_path, sweep_path, out_path,
                                      split=split, seed=cfg.training.seed, precision=precision,
                                      warn=lambda m: click.echo(f"warning: {m}", err=True))
    click.echo(f"wrote {len(rows)} rows to {out_path}")


@main.command("compare-vae")
@config_opt
@seed_opt
@precision_opt
@click.option("--kl", "kl_path", required=True, type=click.Path(exists=True))
@click.option("--vq", "vq_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split", default="val")
def compare_vae(config_path, seed, precision, kl_path, vq_path, out_dir, split):
    """Compare KL vs VQ semantic reconstruction macro-F1."""
    cfg = _cfg(config_path, seed)
    f1_kl, f1_vq = pipeline.cmd_compare_vae(cfg, kl_path, vq_path, out_dir, split=split,
                                            precision=precision)
    click.echo(f"kl {f1_kl:.2f} vq {f1_vq:.2f} gap {f1_kl - f1_vq:+.2f}")
    if f1_kl < f1_vq - 1.0:
        click.echo("note: KL arm underperformed VQ by more than 1 point", err=True)


if __name__ == "__main__":
    sys.exit(main())
