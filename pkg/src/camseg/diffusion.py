"""Per-position latent diffusion: cosine schedule, noising, denoising loss,
and the strided DDPM reverse sampler.

Each latent position is an independent Z-dimensional diffusion conditioned on
its transformer-produced vector, so batches here are flat (N, Z) rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, gelu, layer_norm

__all__ = [
    "NoiseSchedule",
    "ScheduleError",
    "cosine_schedule",
    "stride_schedule",
    "forward_noise",
    "DenoiserMLP",
    "diffusion_loss",
    "ddpm_sample",
]


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] == 1
    alpha: np.ndarray  # (T+1,), index 0 unused
    beta: np.ndarray
    sigma: np.ndarray


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * (np.pi / 2)) ** 2
    alpha_bar = f / f[0]
    beta = np.empty(T + 1)
    beta[0] = np.nan
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    alpha = 1.0 - beta
    # alpha_bar must stay consistent with the clipped betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha[1:])])
    sigma = np.empty(T + 1)
    sigma[0] = np.nan
    sigma2 = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    sigma[1:] = np.sqrt(np.maximum(sigma2, 0.0))
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, alpha=alpha, beta=beta, sigma=sigma)


def stride_schedule(schedule: NoiseSchedule, T_infer: int):
    """Uniformly strided timestep subsequence with a recomputed schedule.

    Returns (timesteps ascending, alpha', beta', sigma', alpha_bar at the
    selected steps); alpha_bar values are taken from the training schedule
    unchanged.
    """
    T = schedule.T
    if not 1 <= T_infer <= T:
        raise ScheduleError(f"T_infer must be in [1, {T}], got {T_infer}")
    ts = np.unique(np.rint(np.linspace(1, T, T_infer)).astype(int))
    ab = schedule.alpha_bar[ts]
    prev = np.concatenate([[0], ts[:-1]])
    ab_prev = schedule.alpha_bar[prev]
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    sigma2 = beta * (1.0 - ab_prev) / (1.0 - ab)
    sigma = np.sqrt(np.maximum(sigma2, 0.0))
    return ts, alpha, beta, sigma, ab


def forward_noise(y_e: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule, literal: bool = False):
    """Noise y_e to timestep t: sqrt(a_bar)*y + sqrt(1-a_bar)*eps.

    `literal=True` uses the non-variance-preserving a_bar (no square root)
    scaling for debugging comparisons.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ScheduleError(f"t out of range [1, {schedule.T}]")
    ab = schedule.alpha_bar[t]
    if np.ndim(t) > 0:
        ab = ab.reshape(ab.shape + (1,) * (y_e.ndim - ab.ndim))
    scale = ab if literal else np.sqrt(ab)
    return scale * y_e + np.sqrt(1.0 - ab) * eps


def _sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class DenoiserMLP:
    """Residual MLP noise estimator with adaptive layer-norm conditioning."""

    def __init__(self, z_dim: int, cond_dim: int, width: int = 256, blocks: int = 3,
                 time_dim: int = 64, rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_init: bool = True):
        # zero_init starts the modulation and output layers at zero (identity
        # blocks, eps-hat == 0); disable for non-degenerate gradient checks
        rng = rng or np.random.default_rng(0)
        self.z_dim = z_dim
        self.cond_dim = cond_dim
        self.width = width
        self.blocks = blocks
        self.time_dim = time_dim

        def lin(name, fan_in, fan_out, zero=False):
            scale = 0.0 if (zero and zero_init) else 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.w"] = Tensor(
                (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        lin("in", z_dim, width)
        lin("cond", cond_dim, width)
        lin("time", time_dim, width)
        for i in range(blocks):
            lin(f"blk{i}.mod", width, 3 * width, zero=True)  # starts as identity block
            lin(f"blk{i}.fc1", width, width)
            lin(f"blk{i}.fc2", width, width)
        lin("out", width, z_dim, zero=True)  # epsilon-hat starts at 0

    def _lin(self, name, x: Tensor) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def forward(self, y_t, t, cond) -> Tensor:
        """y_t: (N, Z); t: (N,) ints; cond: (N, cond_dim) Tensor or array."""
        dtype = self.params["in.w"].dtype
        y_t = y_t if isinstance(y_t, Tensor) else Tensor(np.asarray(y_t, dtype=dtype))
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=dtype))
        temb = Tensor(_sinusoidal_embedding(t, self.time_dim).astype(dtype))
        c = gelu(self._lin("cond", cond) + self._lin("time", temb))
        h = self._lin("in", y_t)
        one = Tensor(np.ones(self.width, dtype=dtype))
        zero = Tensor(np.zeros(self.width, dtype=dtype))
        for i in range(self.blocks):
            mod = self._lin(f"blk{i}.mod", c)
            scale = mod[:, : self.width]
            shift = mod[:, self.width : 2 * self.width]
            gate = mod[:, 2 * self.width :]
            hn = layer_norm(h, one, zero)
            hn = hn * (scale + 1.0) + shift
            u = self._lin(f"blk{i}.fc2", gelu(self._lin(f"blk{i}.fc1", hn)))
            h = h + gate * u
        return self._lin("out", layer_norm(h, one, zero))


class LossError(ValueError):
    pass


def diffusion_loss(cond, targets: np.ndarray, denoiser: DenoiserMLP,
                   schedule: NoiseSchedule, rng: np.random.Generator,
                   literal: bool = False) -> Tensor:
    """Mean over supervised positions of ||eps - eps_hat||^2.

    cond: (N, cond_dim) Tensor (rows already restricted to masked positions);
    targets: (N, Z) clean latents at those positions.
    """
    n = targets.shape[0]
    if n == 0:
        raise LossError("no supervised positions (empty mask)")
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(targets.shape)
    y_t = forward_noise(targets, t, eps, schedule, literal=literal)
    pred = denoiser.forward(y_t, t, cond)
    diff = pred - Tensor(eps.astype(pred.dtype))
    return (diff * diff).sum(axis=-1).mean()


def ddpm_sample(cond, denoiser: DenoiserMLP, schedule: NoiseSchedule,
                infer_steps: int, rng: np.random.Generator,
                eps_fn=None, literal: bool = False, clip: float | None = None) -> np.ndarray:
    """Reverse DDPM over a strided subsequence of timesteps.

    cond: (N, cond_dim); returns (N, Z).  `eps_fn(y_t, t)` overrides the
    learned denoiser (analytic oracles in tests).

    `clip` bounds the implied clean sample to [-clip, clip] at every step
    (static thresholding): the 1/sqrt(alpha) factors amplify noise-prediction
    error multiplicatively across the chain, and an imperfect denoiser can
    otherwise diverge by orders of magnitude.  A bound that is loose for the
    data leaves an accurate chain unchanged.
    """
    if infer_steps < 1:
        raise ScheduleError("infer_steps must be >= 1")
    if clip is not None and clip <= 0:
        raise ScheduleError(f"clip must be positive, got {clip}")
    ts, alpha, beta, sigma, ab = stride_schedule(schedule, infer_steps)
    cond_arr = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    n = cond_arr.shape[0]
    y = rng.standard_normal((n, denoiser.z_dim if denoiser is not None else cond_arr.shape[1]))
    for k in range(len(ts) - 1, -1, -1):
        t = ts[k]
        if eps_fn is not None:
            eps_hat = eps_fn(y, t)
        else:
            eps_hat = denoiser.forward(y, np.full(n, t), cond_arr).data.astype(np.float64)
        if clip is not None:
            root_ab = ab[k] if literal else np.sqrt(ab[k])
            x0 = (y - np.sqrt(1.0 - ab[k]) * eps_hat) / root_ab
            np.clip(x0, -clip, clip, out=x0)
            eps_hat = (y - root_ab * x0) / np.sqrt(1.0 - ab[k])
        num = np.sqrt(1.0 - alpha[k]) if literal else beta[k] / np.sqrt(1.0 - ab[k])
        y = (y - num * eps_hat) / np.sqrt(alpha[k])
        if k > 0:
            y = y + sigma[k] * rng.standard_normal(y.shape)
    return y
