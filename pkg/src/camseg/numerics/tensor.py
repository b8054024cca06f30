"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and, when it participates in a differentiable
graph, remembers its parents and a closure that routes the incoming gradient
to them.  backward() runs the closures in reverse topological order exactly
once per node.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "as_tensor",
    "concat",
    "where",
    "broadcast_to",
    "softmax",
    "layer_norm",
    "gelu",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = None
        self.op = op

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), _parents=(self,), op="astype")
        if out.requires_grad:
            def bwd(g):
                self._accum(g.astype(self.data.dtype))
            out._backward = bwd
        return out

    # -- autodiff ------------------------------------------------------------

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # break closure cycles so the graph frees by refcount, not gc
        for node in topo:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data, _parents=(self, other), op="add")
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g, other.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), op="neg")
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data, _parents=(self, other), op="mul")
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data / other.data, _parents=(self, other), op="div")
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p):
        assert np.isscalar(p)
        out = Tensor(self.data**p, _parents=(self,), op="pow")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        if self.shape[-1] != other.shape[-2 if other.ndim > 1 else 0]:
            raise DimensionError(
                f"matmul inner extents differ: {self.shape} @ {other.shape}"
            )
        out = Tensor(np.matmul(self.data, other.data), _parents=(self, other), op="matmul")
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                    self._accum(_unbroadcast(ga, self.shape))
                if other.requires_grad:
                    gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                    other._accum(_unbroadcast(gb, other.shape))
            out._backward = bwd
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,), op="reshape")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,), op="transpose")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], _parents=(self,), op="slice")
        if out.requires_grad:
            def bwd(g):
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accum(full)
            out._backward = bwd
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")
        if out.requires_grad:
            def bwd(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,), op="exp")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), op="log")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), _parents=(self,), op="sqrt")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * 0.5 / out.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), _parents=(self,), op="tanh")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (1.0 - out.data**2))
        return out

    def clip(self, lo, hi):
        out = Tensor(np.clip(self.data, lo, hi), _parents=(self,), op="clip")
        if out.requires_grad:
            mask = (self.data > lo) & (self.data < hi)
            out._backward = lambda g: self._accum(g * mask)
        return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype or np.float64)
    return Tensor(arr)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        op="concat",
    )
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(a, b)
                    t._accum(g[tuple(idx)])
        out._backward = bwd
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; cond is a plain boolean array (not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.where(cond, a.data, b.data), _parents=(a, b), op="where")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))
        out._backward = bwd
    return out


def broadcast_to(t: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(t.data, shape).copy(), _parents=(t,), op="broadcast")
    if out.requires_grad:
        out._backward = lambda g: t._accum(_unbroadcast(g, t.shape))
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,), op="softmax")
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - dot))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias), op="layer_norm")
    if out.requires_grad:
        def bwd(g):
            n = x.shape[-1]
            if gain.requires_grad:
                gain._accum(_unbroadcast(g * xhat, gain.shape))
            if bias.requires_grad:
                bias._accum(_unbroadcast(g, bias.shape))
            if x.requires_grad:
                gx_hat = g * gain.data
                dx = (
                    gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
                ) * inv
                x._accum(dx)
        out._backward = bwd
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v over the last two axes, as one fused op.

    Chaining the matmul/softmax/matmul primitives keeps three (..., S, S)
    arrays alive per call; fusing retains only the attention weights, which
    is what makes long sequences fit in memory.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    # contiguous copies: the inputs are typically strided slices of a fused
    # qkv projection, and batched matmul is slow on those
    qc = np.ascontiguousarray(q.data) * scale
    kc = np.ascontiguousarray(k.data)
    vc = np.ascontiguousarray(v.data)
    scores = qc @ np.swapaxes(kc, -1, -2)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    att = scores
    out = Tensor(att @ vc, _parents=(q, k, v), op="attention")
    if out.requires_grad:
        def bwd(g):
            g = np.ascontiguousarray(g)
            if v.requires_grad:
                v._accum(np.swapaxes(att, -1, -2) @ g)
            if q.requires_grad or k.requires_grad:
                g_att = g @ np.swapaxes(vc, -1, -2)
                g_att -= (g_att * att).sum(axis=-1, keepdims=True)
                g_att *= att  # now the score gradient
                if q.requires_grad:
                    q._accum((g_att @ kc) * scale)
                if k.requires_grad:
                    k._accum(np.swapaxes(g_att, -1, -2) @ qc)
        out._backward = bwd
    return out


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor(x.data * cdf, _parents=(x,), op="gelu")
    if out.requires_grad:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        out._backward = lambda g: x._accum(g * (cdf + x.data * pdf))
    return out
