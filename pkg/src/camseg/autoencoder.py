"""KL-regularized convolutional autoencoder with an optional VQ bottleneck.

Per stage: stride-2 conv down (transpose conv up) and two residual blocks.
Images live in [-1, 1]; the latent grid is (H/f, W/f, Z) and is viewed as a
sequence of L = (H/f)*(W/f) rows of Z features by the transformer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamW, Tensor, TrainingError, conv2d, conv2d_transpose, gelu

__all__ = [
    "AutoencoderConfig",
    "ConfigError",
    "GaussianPosterior",
    "Autoencoder",
    "sample_latent",
    "kl_loss",
    "vq_bottleneck",
    "train_autoencoder",
    "grid_to_seq",
    "seq_to_grid",
    "to_model_range",
    "from_model_range",
]

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AutoencoderConfig:
    f: int = 4
    z_dim: int = 8
    base_width: int = 32
    kl_weight: float = 1e-6
    codebook_size: int = 64
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.f not in (2, 4, 8, 16):
            raise ConfigError(f"f must be one of 2,4,8,16, got {self.f}")
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")

    @property
    def stages(self) -> int:
        return int(np.log2(self.f))


@dataclass
class GaussianPosterior:
    mean: Tensor  # (B, Z, h', w')
    logvar: Tensor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        std = np.exp(0.5 * self.logvar.data)
        return self.mean.data + std * rng.standard_normal(self.mean.shape).astype(self.mean.data.dtype)


def to_model_range(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (H, W, 3) or (B, H, W, 3) -> float (B, 3, H, W) in [-1, 1]."""
    img = np.asarray(img, dtype=dtype)
    if img.ndim == 3:
        img = img[None]
    return (img / 127.5 - 1.0).transpose(0, 3, 1, 2)


def from_model_range(x: np.ndarray) -> np.ndarray:
    """float (B, 3, H, W) in [-1, 1] -> uint8 (B, H, W, 3), round-to-nearest."""
    img = np.clip((np.asarray(x).transpose(0, 2, 3, 1) + 1.0) * 127.5, 0, 255)
    return np.rint(img).astype(np.uint8)


def grid_to_seq(grid: np.ndarray) -> np.ndarray:
    """(B, Z, h, w) -> (B, L, Z)."""
    b, z, h, w = grid.shape
    return grid.transpose(0, 2, 3, 1).reshape(b, h * w, z)


def seq_to_grid(seq: np.ndarray, h: int, w: int) -> np.ndarray:
    b, L, z = seq.shape
    assert L == h * w
    return seq.reshape(b, h, w, z).transpose(0, 3, 1, 2)


class Autoencoder:
    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._dtype = dtype

        def conv_par(name, c_in, c_out, k):
            scale = 1.0 / np.sqrt(c_in * k * k)
            self.params[f"{name}.w"] = Tensor(
                (rng.standard_normal((c_out, c_in, k, k)) * scale).astype(dtype), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

        def tconv_par(name, c_in, c_out, k):
            scale = 1.0 / np.sqrt(c_in * k * k)
            self.params[f"{name}.w"] = Tensor(
                (rng.standard_normal((c_in, c_out, k, k)) * scale).astype(dtype), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

        widths = [cfg.base_width * 2**min(s, 2) for s in range(cfg.stages + 1)]
        self.widths = widths
        conv_par("enc.stem", 3, widths[0], 3)
        for s in range(cfg.stages):
            conv_par(f"enc.down{s}", widths[s], widths[s + 1], 3)
            for r in range(2):
                conv_par(f"enc.res{s}{r}.c1", widths[s + 1], widths[s + 1], 3)
                conv_par(f"enc.res{s}{r}.c2", widths[s + 1], widths[s + 1], 3)
        conv_par("enc.head", widths[-1], 2 * cfg.z_dim, 3)

        conv_par("dec.stem", cfg.z_dim, widths[-1], 3)
        for s in range(cfg.stages - 1, -1, -1):
            for r in range(2):
                conv_par(f"dec.res{s}{r}.c1", widths[s + 1], widths[s + 1], 3)
                conv_par(f"dec.res{s}{r}.c2", widths[s + 1], widths[s + 1], 3)
            tconv_par(f"dec.up{s}", widths[s + 1], widths[s], 4)
        conv_par("dec.head", widths[0], 3, 3)

        # VQ arm codebook (unused by the kl arm)
        self.params["codebook"] = Tensor(
            (rng.standard_normal((cfg.codebook_size, cfg.z_dim)) * 0.5).astype(dtype),
            requires_grad=True)

    def _c(self, name, x, stride=1):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, pad=1)

    def _res(self, name, x):
        return x + self._c(f"{name}.c2", gelu(self._c(f"{name}.c1", gelu(x))))

    def encode(self, images: np.ndarray | Tensor) -> GaussianPosterior:
        """images: float (B, 3, H, W) in [-1, 1]; H, W divisible by f."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self._dtype))
        h, w = x.shape[2], x.shape[3]
        if h % self.cfg.f or w % self.cfg.f:
            raise ConfigError(f"input {h}x{w} not divisible by f={self.cfg.f}")
        x = gelu(self._c("enc.stem", x))
        for s in range(self.cfg.stages):
            x = self._c(f"enc.down{s}", x, stride=2)
            x = self._res(f"enc.res{s}0", x)
            x = self._res(f"enc.res{s}1", x)
        x = self._c("enc.head", gelu(x))
        z = self.cfg.z_dim
        return GaussianPosterior(mean=x[:, :z], logvar=x[:, z:].clip(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, latent: np.ndarray | Tensor) -> Tensor:
        x = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=self._dtype))
        if x.shape[1] != self.cfg.z_dim:
            raise ConfigError(f"latent channels {x.shape[1]} != Z={self.cfg.z_dim}")
        x = gelu(self._c("dec.stem", x))
        for s in range(self.cfg.stages - 1, -1, -1):
            x = self._res(f"dec.res{s}0", x)
            x = self._res(f"dec.res{s}1", x)
            x = conv2d_transpose(x, self.params[f"dec.up{s}.w"], self.params[f"dec.up{s}.b"],
                                 stride=2, pad=1)
            x = gelu(x)
        return self._c("dec.head", x).tanh()

    def trainable_params(self, arm: str) -> dict[str, Tensor]:
        if arm == "kl":
            return {k: v for k, v in self.params.items() if k != "codebook"}
        return dict(self.params)


def sample_latent(post: GaussianPosterior, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """mode 'mean' returns the posterior mean; 'sample' draws mean + std * eps."""
    if mode == "mean":
        return post.mean.data.copy()
    if mode == "sample":
        if rng is None:
            raise ConfigError("sample mode requires an rng")
        return post.sample(rng)
    raise ConfigError(f"unknown latent mode {mode!r}")


def kl_loss(post: GaussianPosterior) -> Tensor:
    m, lv = post.mean, post.logvar
    return (0.5 * (m * m + lv.exp() - 1.0 - lv)).mean()


def vq_bottleneck(latent: Tensor, codebook: Tensor):
    """latent: (..., Z).  Returns (quantized with straight-through gradient,
    codebook loss, commitment loss, indices)."""
    if codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    flat = latent.data.reshape(-1, latent.shape[-1])
    d = ((flat[:, None, :] - codebook.data[None, :, :]) ** 2).sum(axis=-1)
    idx = d.argmin(axis=1)
    selected = codebook[(idx,)]  # (N, Z), grads flow into the codebook
    z_e = latent.reshape(-1, latent.shape[-1])
    quantized = z_e + (selected - z_e).detach()
    codebook_loss = ((selected - z_e.detach()) ** 2).mean()
    commitment_loss = ((z_e - selected.detach()) ** 2).mean()
    return quantized.reshape(*latent.shape), codebook_loss, commitment_loss, idx.reshape(latent.shape[:-1])


def train_autoencoder(batches, cfg: AutoencoderConfig, steps: int, seed: int,
                      arm: str = "kl", lr: float = 1e-3, log_every: int = 50,
                      model: Autoencoder | None = None, progress=None, dtype=np.float32):
    """Train on an iterator of uint8 image batches (B, H, W, 3).

    A batch may also be an (input, target) pair of uint8 arrays: the model
    encodes the input but reconstructs the target, i.e. a denoising
    autoencoder when inputs are corrupted copies of the targets.

    kl arm: MSE + kl_weight * KL with reparameterized samples.
    vq arm: MSE + codebook loss + commitment_weight * commitment on the
    posterior mean.
    Returns (model, log) where log rows are (step, recon, reg).
    """
    if arm not in ("kl", "vq"):
        raise ConfigError(f"arm must be kl or vq, got {arm}")
    rng = np.random.default_rng(seed)
    model = model or Autoencoder(cfg, rng=np.random.default_rng(seed), dtype=dtype)
    opt = AdamW(model.trainable_params(arm), lr=lr)
    log = []
    for step, batch in enumerate(batches):
        if step >= steps:
            break
        inp, tgt = batch if isinstance(batch, tuple) else (batch, batch)
        x = Tensor(to_model_range(tgt, dtype=model._dtype))
        post = model.encode(x if inp is tgt else Tensor(to_model_range(inp, dtype=model._dtype)))
        if arm == "kl":
            noise = Tensor(rng.standard_normal(post.mean.shape).astype(post.mean.data.dtype))
            latent = post.mean + (0.5 * post.logvar).exp() * noise
            recon = model.decode(latent)
            rec_loss = ((recon - x) ** 2).mean()
            reg = kl_loss(post)
            loss = rec_loss + cfg.kl_weight * reg
        else:
            z_e = post.mean.transpose(0, 2, 3, 1)
            quant, cb_loss, commit, _ = vq_bottleneck(z_e, model.params["codebook"])
            recon = model.decode(quant.transpose(0, 3, 1, 2))
            rec_loss = ((recon - x) ** 2).mean()
            reg = cb_loss + cfg.commitment_weight * commit
            loss = rec_loss + reg
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            log.append((step, rec_loss.item(), reg.item()))
            if progress:
                progress(step, rec_loss.item(), reg.item())
    return model, log
