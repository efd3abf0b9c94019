"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, backward, precision


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(Tensor(x)))
            flat[i] = orig - eps
            fm = _scalar(f(Tensor(x)))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with precision(np.float64):
        t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        out = f(t)
        if out.size != 1:
            raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
        backward(out)
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
                      index: Optional[np.ndarray] = None) -> float:
    """Max elementwise relative error between backward() and central differences.

    Runs in 64-bit.  ``index`` optionally restricts the comparison to a subset
    of flat positions (the analytic gradient is still computed in full).
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        probe = f(Tensor(x))
    if probe.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {probe.shape}")
    ana = analytic_grad(f, x)
    if index is None:
        num = numerical_grad(f, x, eps)
        return relative_error(ana, num)
    index = np.asarray(index, dtype=np.intp)
    num = np.empty(index.size)
    flat = x.reshape(-1)
    with precision(np.float64):
        for j, i in enumerate(index):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(Tensor(x)))
            flat[i] = orig - eps
            fm = _scalar(f(Tensor(x)))
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * eps)
    return relative_error(ana.reshape(-1)[index], num)


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])
