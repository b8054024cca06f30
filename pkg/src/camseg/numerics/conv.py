"""Differentiable 2-d convolutions (NCHW) for the autoencoder.

Both directions are written as a loop over the (small) kernel footprint with
the spatial work done by BLAS tensordots, which is plenty fast for the kernel
sizes used here (3 and 4).
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor

__all__ = ["conv2d", "conv2d_transpose"]


def _conv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            # (n,c,ho,wo) x (o,c) -> (n,o,ho,wo)
            out += np.einsum("nchw,oc->nohw", xs, w[:, :, i, j], optimize=True)
    return out, xp, (ho, wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (N,C,H,W); w: (O,C,kh,kw); b: (O,) or None."""
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    y, xp, (ho, wo) = _conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, _parents=parents, op="conv2d")
    if out.requires_grad:
        o, ci, kh, kw = w.shape

        def bwd(g):
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                        gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xs, optimize=True)
                w._accum(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
                        )
                if pad:
                    gxp = gxp[:, :, pad:-pad, pad:-pad]
                x._accum(gxp)

        out._backward = bwd
    return out


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """x: (N,C,H,W); w: (C,O,kh,kw). Output spatial size (H-1)*stride + kh - 2*pad."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv2d_transpose channel mismatch: input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    hop = (h - 1) * stride + kh
    wop = (wd - 1) * stride + kw
    yp = np.zeros((n, o, hop, wop), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            yp[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += np.einsum(
                "nchw,co->nohw", x.data, w.data[:, :, i, j], optimize=True
            )
    y = yp[:, :, pad : hop - pad, pad : wop - pad]
    if b is not None:
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, _parents=parents, op="conv2d_transpose")
    if out.requires_grad:

        def bwd(g):
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        gs = gp[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
                        gw[:, :, i, j] = np.einsum("nchw,nohw->co", x.data, gs, optimize=True)
                w._accum(gw)
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                for i in range(kh):
                    for j in range(kw):
                        gs = gp[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
                        gx += np.einsum("nohw,co->nchw", gs, w.data[:, :, i, j], optimize=True)
                x._accum(gx)

        out._backward = bwd
    return out
