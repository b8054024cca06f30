"""Central-finite-difference certification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["gradcheck", "GradcheckReport"]


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tol: float


def gradcheck(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Compare reverse-mode grad of scalar-valued f at x with central differences.

    The input is promoted to float64 before evaluation; f must build its
    graph in the dtype it is handed for the comparison to be meaningful.
    """
    x = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x)
    out.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    rel_err = abs_err / denom
    return GradcheckReport(
        max_rel_error=float(rel_err.max()),
        max_abs_error=float(abs_err.max()),
        passed=bool(rel_err.max() < tol),
        tol=tol,
    )
