from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(f, x: Tensor, h: float = 1e-4, indices=None) -> np.ndarray:
    """Central differences of scalar ``f(x)`` w.r.t. ``x``, perturbing in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x).data)
        flat[i] = old - h
        fm = float(f(x).data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_check(f, x: Tensor, h: float = 1e-4, floor: float = 1e-7,
                            indices=None) -> float:
    """Worst elementwise relative error between reverse-mode and central differences.

    The relative error at element i is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` stops exact zeros from dividing by zero. ``indices`` restricts
    the comparison to some flat positions.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not x.requires_grad:
        raise ValueError("x must require gradients")
    x.grad = np.zeros_like(x.data)
    f(x).backward()
    analytic = x.grad.copy()
    numeric = numerical_gradient(f, x, h, indices)
    if indices is not None:
        idx = np.asarray(list(indices), dtype=int)
        analytic = analytic.reshape(-1)[idx]
        numeric = numeric.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
