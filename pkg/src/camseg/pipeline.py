"""End-to-end orchestration: dataset generation, the two training stages,
inference, evaluation, corruption sweeps, and the KL-vs-VQ comparison.

Everything is deterministic from the master seed in the config; per-component
generators come from a fixed derivation so reruns reproduce outputs
byte-identically.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as datamod
from .autoencoder import (
    Autoencoder,
    ConfigError,
    from_model_range,
    grid_to_seq,
    seq_to_grid,
    to_model_range,
    train_autoencoder,
    vq_bottleneck,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, derive_rng, derive_seed
from .corruption import CorruptionError, apply_corruption, gaussian_noise, salt_pepper
from .diffusion import DenoiserMLP, cosine_schedule, ddpm_sample, diffusion_loss
from .metrics import (
    CategorySpec,
    ConfusionMatrix,
    MetricsError,
    SUMMARY_COLUMNS,
    bundled_category_spec_path,
    compute_report,
    f1_macro,
)
from .numerics import AdamW, Tensor, TrainingError
from .palette import Palette, bundled_palette_path, colorize, declassify, load_palette
from .transformer import Transformer, sample_mask_ratio

__all__ = [
    "resolve_palette",
    "resolve_category_spec",
    "cmd_gen_data",
    "cmd_train_vae",
    "cmd_train_model",
    "load_vae",
    "load_model",
    "infer_masks",
    "cmd_infer",
    "cmd_eval",
    "cmd_corrupt_sweep",
    "cmd_compare_vae",
]


def resolve_palette(name_or_path: str) -> Palette:
    p = Path(name_or_path)
    if not p.is_file():
        p = bundled_palette_path(name_or_path)
    return load_palette(p)


def resolve_category_spec(name_or_path: str) -> CategorySpec:
    p = Path(name_or_path)
    if not p.is_file():
        p = bundled_category_spec_path(name_or_path)
    return CategorySpec.load(p)


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


# -- dataset ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, force: bool = False) -> dict:
    ds = cfg.dataset
    spec = datamod.SceneSpec(
        height=ds.height, width=ds.width, num_classes=ds.num_classes,
        texture_scale=ds.texture_scale, seed=derive_seed(cfg.training.seed, "data") % 2**32)
    return datamod.generate_dataset(
        ds.root, spec, {"train": ds.train_count, "val": ds.val_count}, force=force)


def _split(cfg: RunConfig, split: str) -> datamod.DatasetHandle:
    root = Path(cfg.dataset.root) / split
    return datamod.load_paired_dataset(root / "img", root / "mask", split=split)


def _augment_rgb(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random training-time corruption of an RGB input (targets stay clean)."""
    seed = int(rng.integers(2**32))
    if rng.random() < 0.5:
        return gaussian_noise(img, float(rng.uniform(0.0, 100.0)), seed)
    return salt_pepper(img, float(rng.uniform(0.0, 0.5)), seed)


def _vae_batches(handle, palette, batch, rng, noise_aug=0.0):
    """Endless (input, target) batches mixing RGB images and colorized semantic
    images 50/50.  RGB inputs are corrupted with probability noise_aug while
    targets stay clean, so the encoder learns corruption-invariant latents."""
    while True:
        idx = rng.integers(0, len(handle), size=batch)
        use_sem = rng.random(batch) < 0.5
        inputs, targets = [], []
        for i, sem in zip(idx, use_sem):
            img, mask = handle.get(int(i))
            clean = colorize(mask, palette) if sem else img
            targets.append(clean)
            if not sem and rng.random() < noise_aug:
                clean = _augment_rgb(clean, rng)
            inputs.append(clean)
        yield np.stack(inputs), np.stack(targets)


# -- stage 1: autoencoder -----------------------------------------------------

def cmd_train_vae(cfg: RunConfig, arm: str, out_path, precision: str = "f32",
                  log_path=None, progress=None):
    handle = _split(cfg, "train")
    palette = resolve_palette(cfg.dataset.palette)
    tr = cfg.training
    rng = derive_rng(tr.seed, f"vae-data-{arm}")
    model, log = train_autoencoder(
        _vae_batches(handle, palette, tr.vae_batch, rng, noise_aug=tr.vae_noise_aug),
        cfg.autoencoder, tr.vae_steps, derive_seed(tr.seed, f"vae-{arm}") % 2**32,
        arm=arm, lr=tr.vae_lr, progress=progress, dtype=_dtype(precision))
    tensors = {f"vae.{k}": v.data for k, v in model.params.items()}
    save_checkpoint(out_path, tensors,
                    {"kind": "vae", "arm": arm, "step": tr.vae_steps, "config": cfg.to_dict()})
    if log_path:
        lines = ["step,recon,reg"] + [f"{s},{r:.6f},{g:.6f}" for s, r, g in log]
        Path(log_path).write_text("\n".join(lines) + "\n")
    return model, log


def load_vae(path, precision: str = "f32") -> tuple[Autoencoder, RunConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    model = Autoencoder(cfg.autoencoder, dtype=_dtype(precision))
    for k, p in model.params.items():
        p.data = tensors[f"vae.{k}"].astype(p.dtype)
    return model, cfg


def _freeze(*models):
    # inference-only paths skip the gradient tape entirely
    for m in models:
        for p in m.params.values():
            p.requires_grad = False


# -- stage 2: transformer + diffusion -----------------------------------------

def _encode_seq(vae: Autoencoder, images_u8: np.ndarray, mode: str, rng=None) -> np.ndarray:
    """uint8 (B, H, W, 3) -> latent sequence (B, L, Z) with no gradient tape."""
    post = vae.encode(to_model_range(images_u8))
    if mode == "mean":
        lat = post.mean.data
    else:
        lat = post.sample(rng)
    return grid_to_seq(lat)


def lr_at_step(tr, step: int) -> float:
    """Stage-2 learning rate at a given step.

    "constant" returns tr.lr; "cosine" is linear warmup from 0 over
    tr.warmup_steps, then cosine decay from tr.lr down to tr.lr_min over
    tr.lr_decay_steps total steps (tr.steps when left at 0), holding lr_min
    afterwards.
    """
    if tr.lr_schedule == "constant":
        return tr.lr
    if tr.lr_schedule != "cosine":
        raise ConfigError(f"unknown lr_schedule {tr.lr_schedule!r}")
    if step < tr.warmup_steps:
        return tr.lr * (step + 1) / tr.warmup_steps
    horizon = tr.lr_decay_steps or tr.steps
    span = max(horizon - tr.warmup_steps, 1)
    frac = min((step - tr.warmup_steps) / span, 1.0)
    return tr.lr_min + 0.5 * (tr.lr - tr.lr_min) * (1.0 + math.cos(math.pi * frac))


def cmd_train_model(cfg: RunConfig, vae_path, out_path, precision: str = "f32",
                    log_path=None, progress=None):
    if not cfg.autoencoder_frozen:
        raise ConfigError("pipeline training requires a frozen autoencoder")
    dtype = _dtype(precision)
    vae, _ = load_vae(vae_path, precision)
    _freeze(vae)
    handle = _split(cfg, "train")
    palette = resolve_palette(cfg.dataset.palette)
    tr = cfg.training

    tf = Transformer(cfg.transformer, rng=derive_rng(tr.seed, "tf-init"), dtype=dtype)
    dn = DenoiserMLP(cfg.autoencoder.z_dim, cfg.transformer.width,
                     width=cfg.diffusion.denoiser_width, blocks=cfg.diffusion.denoiser_blocks,
                     time_dim=cfg.diffusion.time_dim, rng=derive_rng(tr.seed, "dn-init"), dtype=dtype)
    schedule = cosine_schedule(cfg.diffusion.t_train)

    trainable = {f"tf.{k}": v for k, v in tf.params.items()}
    trainable.update({f"dn.{k}": v for k, v in dn.params.items()})
    assert not any(k.startswith("vae.") for k in trainable)
    opt = AdamW(trainable, lr=tr.lr)

    rng = derive_rng(tr.seed, "model-train")
    log = []
    for step in range(tr.steps):
        idx = rng.integers(0, len(handle), size=tr.batch)
        imgs, masks = zip(*(handle.get(int(i)) for i in idx))
        # conditioning images get the same corruption augmentation as the
        # autoencoder saw; the semantic targets stay clean
        x_u8 = np.stack([
            _augment_rgb(im, rng) if rng.random() < tr.model_noise_aug else im
            for im in imgs])
        y_u8 = np.stack([colorize(m, palette) for m in masks])
        x_e = _encode_seq(vae, x_u8, "mean")
        y_e = _encode_seq(vae, y_u8, tr.latent_target_mode, rng)

        ratio = sample_mask_ratio(rng)
        seq, plan = tf.build_training_sequence(x_e, y_e, ratio, rng)
        z = tf.forward(seq)  # (B, L, d)
        rows, cols = np.nonzero(plan.masked)
        cond = z[(rows, cols)]
        targets = y_e[rows, cols]
        loss = diffusion_loss(cond, targets, dn, schedule, rng)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.lr = lr_at_step(tr, step)
        opt.step()
        if step % 50 == 0 or step == tr.steps - 1:
            log.append((step, loss.item()))
            if progress:
                progress(step, loss.item())

    tensors = {k: v.data for k, v in trainable.items()}
    save_checkpoint(out_path, tensors,
                    {"kind": "model", "step": tr.steps, "vae": str(vae_path),
                     "config": cfg.to_dict()})
    if log_path:
        Path(log_path).write_text(
            "step,loss\n" + "\n".join(f"{s},{v:.6f}" for s, v in log) + "\n")
    return (tf, dn), log


def load_model(path, precision: str = "f32"):
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    dtype = _dtype(precision)
    tf = Transformer(cfg.transformer, dtype=dtype)
    dn = DenoiserMLP(cfg.autoencoder.z_dim, cfg.transformer.width,
                     width=cfg.diffusion.denoiser_width, blocks=cfg.diffusion.denoiser_blocks,
                     time_dim=cfg.diffusion.time_dim, dtype=dtype)
    for k, p in tf.params.items():
        p.data = tensors[f"tf.{k}"].astype(p.dtype)
    for k, p in dn.params.items():
        p.data = tensors[f"dn.{k}"].astype(p.dtype)
    return tf, dn, cfg


# -- inference ----------------------------------------------------------------

def infer_masks(vae: Autoencoder, tf: Transformer, dn: DenoiserMLP, cfg: RunConfig,
                images_u8: np.ndarray, palette: Palette, seed: int,
                ar_steps: int = 1):
    """Predict masks for a uint8 batch (B, H, W, 3).

    Returns (masks (B, H, W) uint8, semantic images (B, H, W, 3) uint8).
    """
    if images_u8.ndim == 3:
        images_u8 = images_u8[None]
    b = images_u8.shape[0]
    h, w = images_u8.shape[1:3]
    if h % cfg.autoencoder.f or w % cfg.autoencoder.f:
        raise ConfigError(f"input {h}x{w} not divisible by f={cfg.autoencoder.f}")
    hp, wp = h // cfg.autoencoder.f, w // cfg.autoencoder.f
    L = hp * wp
    rng = np.random.default_rng(seed)
    schedule = cosine_schedule(cfg.diffusion.t_train)
    x_e = _encode_seq(vae, images_u8, "mean")

    if ar_steps < 1:
        raise ConfigError("ar_steps must be >= 1")
    masked = np.ones((b, L), dtype=bool)
    known = np.zeros((b, L, cfg.autoencoder.z_dim))
    for k in range(ar_steps):
        seq = tf.build_inference_sequence(x_e, masked=masked, known_y_e=known)
        z = tf.forward(seq).data
        rows, cols = np.nonzero(masked)
        cond = z[rows, cols]
        sampled = ddpm_sample(cond, dn, schedule, cfg.diffusion.t_infer, rng,
                              clip=cfg.diffusion.sample_clip)
        if k == ar_steps - 1:
            known[rows, cols] = sampled
            masked[:] = False
            break
        # keep the most confident fraction: lowest denoiser residual at t=1
        resid = np.linalg.norm(
            dn.forward(sampled, np.ones(len(rows), dtype=int), cond).data, axis=-1)
        remain_target = int(np.ceil(L * (1.0 - (k + 1) / ar_steps)))
        for i in range(b):
            sel = rows == i
            n_masked = int(sel.sum())
            n_unmask = n_masked - remain_target
            if n_unmask <= 0:
                continue
            order = np.argsort(resid[sel])[:n_unmask]
            pos = cols[sel][order]
            known[i, pos] = sampled[sel][order]
            masked[i, pos] = False

    y_grid = seq_to_grid(known, hp, wp).astype(vae.params["dec.head.w"].dtype)
    dec = vae.decode(y_grid).data
    sem = from_model_range(dec)
    masks = np.stack([declassify(s, palette) for s in sem])
    return masks, sem


def cmd_infer(cfg: RunConfig, vae_path, model_path, image_paths, out_dir,
              seed: int = 0, ar_steps: int | None = None, precision: str = "f32"):
    vae, _ = load_vae(vae_path, precision)
    tf, dn, mcfg = load_model(model_path, precision)
    _freeze(vae, tf, dn)
    palette = resolve_palette(cfg.dataset.palette)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = ar_steps if ar_steps is not None else cfg.eval.ar_steps
    outputs = []
    for p in image_paths:
        img = datamod.load_png(p)
        masks, sems = infer_masks(vae, tf, dn, cfg, img, palette,
                                  seed=derive_seed(seed, f"infer-{Path(p).stem}") % 2**32,
                                  ar_steps=steps)
        mask_path = out_dir / f"{Path(p).stem}_mask.png"
        sem_path = out_dir / f"{Path(p).stem}_sem.png"
        datamod.save_png(masks[0], mask_path)
        datamod.save_png(sems[0], sem_path)
        outputs.append((mask_path, sem_path))
    return outputs


# -- evaluation ---------------------------------------------------------------

def _eval_confusion(vae, tf, dn, cfg: RunConfig, handle, palette, seed: int,
                    corrupt=None, ar_steps: int = 1) -> ConfusionMatrix:
    k = palette.num_classes
    batch = cfg.eval.batch
    n_batches = (len(handle) + batch - 1) // batch

    def run_batch(bi):
        cm = ConfusionMatrix(k)
        lo, hi = bi * batch, min((bi + 1) * batch, len(handle))
        imgs, masks = zip(*(handle.get(i) for i in range(lo, hi)))
        imgs = np.stack(imgs)
        if corrupt is not None:
            imgs = np.stack([corrupt(im, lo + j) for j, im in enumerate(imgs)])
        pred, _ = infer_masks(vae, tf, dn, cfg, imgs, palette,
                              seed=derive_seed(seed, f"eval-batch-{bi}") % 2**32,
                              ar_steps=ar_steps)
        for gt, pr in zip(masks, pred):
            cm.accumulate(gt, pr)
        return cm

    threads = int(os.environ.get("CAMSEG_THREADS", "1"))
    total = ConfusionMatrix(k)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for cm in pool.map(run_batch, range(n_batches)):
                total.merge(cm)
    else:
        for bi in range(n_batches):
            total.merge(run_batch(bi))
    return total


def cmd_eval(cfg: RunConfig, vae_path, model_path, out_dir, split: str = "val",
             seed: int = 0, precision: str = "f32", ar_steps: int | None = None):
    vae, _ = load_vae(vae_path, precision)
    tf, dn, _ = load_model(model_path, precision)
    _freeze(vae, tf, dn)
    palette = resolve_palette(cfg.dataset.palette)
    spec = resolve_category_spec(cfg.dataset.category_spec)
    handle = _split(cfg, split)
    steps = ar_steps if ar_steps is not None else cfg.eval.ar_steps
    cm = _eval_confusion(vae, tf, dn, cfg, handle, palette, seed, ar_steps=steps)
    report = compute_report(cm, spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_summary_csv(out_dir / "summary.csv", run_name=split)
    report.write_per_class_csv(out_dir / "per_class.csv")
    cm.to_csv(out_dir / "confusion.csv", class_names=spec.classes)
    return report


# -- corruption sweep ---------------------------------------------------------

def cmd_corrupt_sweep(cfg: RunConfig, vae_path, model_path, sweep_path, out_path,
                      split: str = "val", seed: int = 0, precision: str = "f32",
                      warn=print):
    vae, _ = load_vae(vae_path, precision)
    tf, dn, _ = load_model(model_path, precision)
    _freeze(vae, tf, dn)
    palette = resolve_palette(cfg.dataset.palette)
    spec = resolve_category_spec(cfg.dataset.category_spec)
    handle = _split(cfg, split)
    sweep = json.loads(Path(sweep_path).read_text())

    def report_for(corrupt):
        cm = _eval_confusion(vae, tf, dn, cfg, handle, palette, seed, corrupt=corrupt)
        return compute_report(cm, spec)

    rows = []

    def add_row(kind, param, cseed, rep):
        vals = ",".join("-" if np.isnan(v) else f"{v:.4f}" for v in rep.summary_row())
        rows.append(f"{kind},{param},{cseed},{vals}")

    add_row("clean", "", "", report_for(None))
    for entry in sweep:
        kind = entry.get("kind")
        for param in entry.get("parameters", []):
            for cseed in entry.get("seeds", [0]):
                def corrupt(img, index, _k=kind, _p=param, _s=cseed):
                    return apply_corruption(img, _k, _p, seed=(_s * 1000003 + index) % 2**32)
                try:
                    # validate parameters on a probe image before the full pass
                    apply_corruption(handle.get(0)[0], kind, param, seed=0)
                except CorruptionError as e:
                    warn(f"skipping {kind} param={param}: {e}")
                    continue
                add_row(kind, param, cseed, report_for(corrupt))
    header = "kind,parameter,seed," + ",".join(SUMMARY_COLUMNS)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(header + "\n" + "\n".join(rows) + "\n")
    return rows


# -- KL vs VQ comparison ------------------------------------------------------

def _vae_recon_confusion(vae: Autoencoder, arm: str, handle, palette) -> ConfusionMatrix:
    cm = ConfusionMatrix(palette.num_classes)
    for i in range(len(handle)):
        _, mask = handle.get(i)
        sem = colorize(mask, palette)
        post = vae.encode(to_model_range(sem))
        lat = post.mean
        if arm == "vq":
            z_e = lat.transpose(0, 2, 3, 1)
            quant, _, _, _ = vq_bottleneck(z_e, vae.params["codebook"])
            lat = quant.transpose(0, 3, 1, 2)
        dec = vae.decode(lat.data).data
        recon = from_model_range(dec)[0]
        cm.accumulate(mask, declassify(recon, palette))
    return cm


def cmd_compare_vae(cfg: RunConfig, kl_path, vq_path, out_dir, split: str = "val",
                    precision: str = "f32"):
    palette = resolve_palette(cfg.dataset.palette)
    handle = _split(cfg, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for arm, path in (("kl", kl_path), ("vq", vq_path)):
        vae, _ = load_vae(path, precision)
        _freeze(vae)
        cm = _vae_recon_confusion(vae, arm, handle, palette)
        results[arm] = f1_macro(cm)
        cm.to_csv(out_dir / f"confusion_{arm}.csv",
                  class_names=resolve_category_spec(cfg.dataset.category_spec).classes)
    gap = results["kl"] - results["vq"]
    lines = ["arm,macro_f1,signed_gap",
             f"kl,{results['kl']:.4f},{gap:.4f}",
             f"vq,{results['vq']:.4f},{-gap:.4f}"]
    (out_dir / "compare.csv").write_text("\n".join(lines) + "\n")
    return results["kl"], results["vq"]
