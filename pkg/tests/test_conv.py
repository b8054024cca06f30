"""Convolution ops against scipy oracles, gradient checks, and the
conv/transpose-conv adjoint identity."""

import numpy as np
import pytest
from scipy.signal import correlate2d

from camseg.numerics import DimensionError, Tensor, conv2d, conv2d_transpose, gradcheck


def conv_oracle(x, w, stride, pad):
    """Direct per-channel correlate2d accumulation."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    kh, kw = w.shape[2:]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            acc = np.zeros((h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1))
            for ci in range(c):
                xp = np.pad(x[ni, ci], pad)
                acc += correlate2d(xp, w[oi, ci], mode="valid")
            out[ni, oi] = acc[::stride, ::stride]
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 1, 4)])
def test_conv2d_matches_scipy(stride, pad, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    y = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
    np.testing.assert_allclose(y.data, conv_oracle(x, w, stride, pad), atol=1e-10)


def test_conv2d_bias_broadcast():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = np.array([1.0, -2.0, 0.5])
    y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1)
    y0 = conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
    np.testing.assert_allclose(y.data, y0.data + b[None, :, None, None])


def test_conv2d_gradcheck():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    b = Tensor(rng.standard_normal(2))
    rep = gradcheck(
        lambda x: (conv2d(x.reshape(1, 3, 5, 5), w, b, stride=2, pad=1) ** 2).sum(),
        Tensor(rng.standard_normal(75), requires_grad=True),
    )
    assert rep.passed, rep.max_rel_error
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    rep = gradcheck(
        lambda wf: (conv2d(x, wf.reshape(2, 3, 3, 3), b, stride=1, pad=1) ** 2).sum(),
        Tensor(rng.standard_normal(54), requires_grad=True),
    )
    assert rep.passed, rep.max_rel_error


def test_conv2d_transpose_gradcheck():
    rng = np.random.default_rng(3)
    w = Tensor(rng.standard_normal((3, 2, 4, 4)))
    rep = gradcheck(
        lambda x: (conv2d_transpose(x.reshape(1, 3, 3, 3), w, stride=2, pad=1) ** 2).sum(),
        Tensor(rng.standard_normal(27), requires_grad=True),
    )
    assert rep.passed, rep.max_rel_error


def test_conv2d_transpose_output_shape():
    x = Tensor(np.zeros((1, 4, 8, 8)))
    w = Tensor(np.zeros((4, 2, 4, 4)))
    y = conv2d_transpose(x, w, stride=2, pad=1)
    assert y.shape == (1, 2, 16, 16)  # (H-1)*2 + 4 - 2


def test_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_T(y)> for the same kernel array: the conv's
    # (O, C, kh, kw) layout is read as (C_in, O, kh, kw) by the transpose op,
    # which is what makes stride-2 upsampling the exact gradient of stride-2
    # downsampling
    rng = np.random.default_rng(4)
    w = rng.standard_normal((5, 3, 4, 4))  # (O, C, kh, kw)
    x = rng.standard_normal((2, 3, 8, 8))
    y = rng.standard_normal((2, 5, 4, 4))
    fwd = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    back = conv2d_transpose(Tensor(y), Tensor(w), stride=2, pad=1).data
    assert np.vdot(fwd, y) == pytest.approx(np.vdot(x, back), rel=1e-10)


def test_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d_transpose(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 4, 4))))
