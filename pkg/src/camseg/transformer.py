"""Masked bidirectional transformer over the [rgb latents || semantic latents]
sequence.

The encoder and decoder stacks use full (non-causal) self-attention; masked
semantic slots carry a learned mask token, so the forward pass never sees the
targets it is trained to generate.  The decoder rows over the semantic half
are the per-position condition vectors for the diffusion head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, broadcast_to, concat, gelu, layer_norm, scaled_dot_attention, where

__all__ = [
    "TransformerConfig",
    "MaskPlan",
    "SequenceBatch",
    "SequenceError",
    "sample_mask_ratio",
    "Transformer",
]

MASK_RATIO_FLOOR = 0.70
MASK_RATIO_STD = 0.25


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    width: int = 128
    heads: int = 4
    encoder_depth: int = 4
    decoder_depth: int = 4
    mlp_ratio: int = 4
    seq_capacity: int = 512  # 2L
    z_dim: int = 8
    encoder_drops_masked: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise SequenceError("width must be divisible by heads")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise SequenceError("depths must be >= 1")


@dataclass
class MaskPlan:
    masked: np.ndarray  # (B, L) bool, True = masked
    ratio: float


@dataclass
class SequenceBatch:
    tokens: Tensor  # (B, 2L, d)
    masked: np.ndarray  # (B, L) bool over the semantic half
    seq_len: int  # L


def sample_mask_ratio(rng: np.random.Generator) -> float:
    """Truncated Normal(1.0, 0.25) restricted to [0.70, 1.00] by resampling."""
    while True:
        r = rng.normal(1.0, MASK_RATIO_STD)
        if MASK_RATIO_FLOOR <= r <= 1.0:
            return float(r)


class Transformer:
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.width
        self.params: dict[str, Tensor] = {}

        def par(name, shape, scale=None, zero=False):
            if zero:
                arr = np.zeros(shape, dtype=dtype)
            else:
                scale = 1.0 / np.sqrt(shape[0]) if scale is None else scale
                arr = (rng.standard_normal(shape) * scale).astype(dtype)
            self.params[name] = Tensor(arr, requires_grad=True)

        par("proj_rgb.w", (cfg.z_dim, d))
        par("proj_rgb.b", (d,), zero=True)
        par("proj_sem.w", (cfg.z_dim, d))
        par("proj_sem.b", (d,), zero=True)
        par("mask_token", (d,), zero=True)
        par("pos", (cfg.seq_capacity, d), scale=0.02)
        par("seg", (2, d), scale=0.02)
        for stack, depth in (("enc", cfg.encoder_depth), ("dec", cfg.decoder_depth)):
            for i in range(depth):
                pre = f"{stack}{i}"
                self.params[f"{pre}.ln1.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                par(f"{pre}.ln1.b", (d,), zero=True)
                par(f"{pre}.qkv.w", (d, 3 * d))
                par(f"{pre}.qkv.b", (3 * d,), zero=True)
                par(f"{pre}.attn_out.w", (d, d))
                par(f"{pre}.attn_out.b", (d,), zero=True)
                self.params[f"{pre}.ln2.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                par(f"{pre}.ln2.b", (d,), zero=True)
                par(f"{pre}.fc1.w", (d, cfg.mlp_ratio * d))
                par(f"{pre}.fc1.b", (cfg.mlp_ratio * d,), zero=True)
                par(f"{pre}.fc2.w", (cfg.mlp_ratio * d, d))
                par(f"{pre}.fc2.b", (d,), zero=True)
        self.params["final_ln.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        par("final_ln.b", (d,), zero=True)

    # -- sequence construction ------------------------------------------------

    def _embed(self, x_e: np.ndarray, sem_tokens: Tensor, seq_len: int) -> Tensor:
        p = self.params
        dtype = p["pos"].dtype
        rgb = Tensor(np.asarray(x_e, dtype=dtype)) @ p["proj_rgb.w"] + p["proj_rgb.b"]
        tokens = concat([rgb, sem_tokens], axis=1)  # (B, 2L, d)
        pos = p["pos"][: 2 * seq_len]
        seg = concat([
            broadcast_to(p["seg"][0:1], (seq_len, self.cfg.width)),
            broadcast_to(p["seg"][1:2], (seq_len, self.cfg.width)),
        ], axis=0)
        return tokens + pos + seg

    def build_training_sequence(self, x_e: np.ndarray, y_e: np.ndarray,
                                ratio: float, rng: np.random.Generator):
        """x_e, y_e: (B, L, Z).  Masks ceil(ratio*L) semantic positions per row."""
        x_e = np.atleast_3d(x_e)
        y_e = np.atleast_3d(y_e)
        if x_e.shape[:2] != y_e.shape[:2] or x_e.shape[2] != y_e.shape[2]:
            raise SequenceError(f"x_e {x_e.shape} and y_e {y_e.shape} disagree")
        b, L, _ = x_e.shape
        if 2 * L > self.cfg.seq_capacity:
            raise SequenceError(f"sequence 2L={2 * L} exceeds capacity {self.cfg.seq_capacity}")
        n_mask = int(np.ceil(ratio * L))
        masked = np.zeros((b, L), dtype=bool)
        for i in range(b):
            masked[i, rng.permutation(L)[:n_mask]] = True

        p = self.params
        sem = Tensor(np.asarray(y_e, dtype=p["pos"].dtype)) @ p["proj_sem.w"] + p["proj_sem.b"]
        sem = where(masked[:, :, None], p["mask_token"], sem)
        tokens = self._embed(x_e, sem, L)
        return SequenceBatch(tokens=tokens, masked=masked, seq_len=L), MaskPlan(masked=masked, ratio=ratio)

    def build_inference_sequence(self, x_e: np.ndarray, masked: np.ndarray | None = None,
                                 known_y_e: np.ndarray | None = None) -> SequenceBatch:
        """Fully masked semantic half by default; progressive unmasking passes a
        partial mask plus the already-generated latents."""
        x_e = np.atleast_3d(x_e)
        b, L, _ = x_e.shape
        if 2 * L > self.cfg.seq_capacity:
            raise SequenceError(f"sequence 2L={2 * L} exceeds capacity {self.cfg.seq_capacity}")
        if masked is None:
            masked = np.ones((b, L), dtype=bool)
        p = self.params
        if known_y_e is None:
            known_y_e = np.zeros((b, L, self.cfg.z_dim))
        sem = Tensor(np.asarray(known_y_e, dtype=p["pos"].dtype)) @ p["proj_sem.w"] + p["proj_sem.b"]
        sem = where(masked[:, :, None], p["mask_token"], sem)
        tokens = self._embed(x_e, sem, L)
        return SequenceBatch(tokens=tokens, masked=masked, seq_len=L)

    # -- forward --------------------------------------------------------------

    def _block(self, pre: str, x: Tensor) -> Tensor:
        p = self.params
        cfg = self.cfg
        d, h = cfg.width, cfg.heads
        dh = d // h
        b, s, _ = x.shape

        xn = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        qkv = xn @ p[f"{pre}.qkv.w"] + p[f"{pre}.qkv.b"]
        qkv = qkv.reshape(b, s, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        ctx = scaled_dot_attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, s, d)
        x = x + ctx @ p[f"{pre}.attn_out.w"] + p[f"{pre}.attn_out.b"]

        xn = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        mlp = gelu(xn @ p[f"{pre}.fc1.w"] + p[f"{pre}.fc1.b"]) @ p[f"{pre}.fc2.w"] + p[f"{pre}.fc2.b"]
        return x + mlp

    def forward(self, seq: SequenceBatch) -> Tensor:
        """Returns condition vectors z: (B, L, d) aligned to semantic positions."""
        cfg = self.cfg
        x = seq.tokens
        L = seq.seq_len
        if cfg.encoder_drops_masked:
            keep = ~seq.masked  # (B, L) over the semantic half
            n_keep = int(keep[0].sum())
            if not np.all(keep.sum(axis=1) == n_keep):
                raise SequenceError("drop-masked encoder requires a uniform keep count per row")
            b = x.shape[0]
            rows = np.arange(b)[:, None].repeat(n_keep, axis=1)
            cols = (L + np.nonzero(keep)[1]).reshape(b, n_keep)
            h = concat([x[:, :L], x[(rows, cols)]], axis=1) if n_keep else x[:, :L]
            for i in range(cfg.encoder_depth):
                h = self._block(f"enc{i}", h)
            # rebuild the 2L layout: encoded rgb + encoded kept slots scattered
            # back, masked slots keeping their embedded mask-token rows
            gidx = np.zeros((b, 2 * L), dtype=int)
            flag = np.concatenate([np.ones((b, L), dtype=bool), keep], axis=1)
            for i in range(b):
                pos = np.nonzero(flag[i])[0]
                gidx[i, pos] = np.arange(len(pos))
            gathered = h[(np.arange(b)[:, None].repeat(2 * L, axis=1), gidx)]
            x = where(flag[:, :, None], gathered, x)
        else:
            for i in range(cfg.encoder_depth):
                x = self._block(f"enc{i}", x)
        for i in range(cfg.decoder_depth):
            x = self._block(f"dec{i}", x)
        x = layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])
        return x[:, L:, :]
