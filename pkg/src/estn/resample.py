"""Separable resampling kernels: bicubic (a = -0.5) and Gaussian blur, edge-clamped."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

CUBIC_A = -0.5


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def bicubic_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix; rows sum to one.

    When shrinking, the kernel is stretched by the inverse scale (antialiasing).
    """
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    m = np.zeros((n_out, n_in))
    taps = int(math.ceil(2 * support)) + 2
    for i, c in enumerate(centers):
        left = int(math.floor(c - support))
        idx = np.arange(left, left + taps)
        wts = cubic((c - idx) / stretch)
        np.add.at(m[i], np.clip(idx, 0, n_in - 1), wts)
    return m / m.sum(axis=1, keepdims=True)


def bicubic_resize(img, scale: Optional[float] = None, size: Optional[Tuple[int, int]] = None):
    """Resize ``[C, H, W]`` by ``scale`` or to ``size=(h, w)``."""
    src = np.asarray(img)
    out_dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64
    arr = src.astype(np.float64)
    _, h, w = arr.shape
    if size is None:
        if scale is None:
            raise ValueError("give scale or size")
        size = (int(round(h * scale)), int(round(w * scale)))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate target size {size}")
    my = bicubic_matrix(h, oh)
    mx = bicubic_matrix(w, ow)
    out = np.einsum("oh,chw,pw->cop", my, arr, mx, optimize=True)
    return out.astype(out_dtype)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float):
    """Separable Gaussian blur of the last two axes, radius ceil(3 sigma), edges clamped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2

    def along(a, axis):
        n = a.shape[axis]
        out = np.zeros_like(a)
        for j, wt in enumerate(k):
            idx = np.clip(np.arange(n) + j - r, 0, n - 1)
            out += wt * np.take(a, idx, axis=axis)
        return out

    return along(along(arr, -2), -1)
