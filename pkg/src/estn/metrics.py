"""Y-channel PSNR and SSIM on 8-bit-range images."""

from __future__ import annotations

import math

import numpy as np

from .resample import gaussian_kernel1d

PEAK = 255.0
PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def rgb_to_y(img) -> np.ndarray:
    """Full-range BT.601 luma of a ``[3, H, W]`` image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _prepare(sr, hr, border: int):
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    ys, yh = rgb_to_y(np.clip(sr, 0, PEAK)), rgb_to_y(np.clip(hr, 0, PEAK))
    if border:
        if 2 * border >= min(ys.shape):
            raise ValueError(f"border {border} leaves nothing of a {ys.shape} image")
        ys, yh = ys[border:-border, border:-border], yh[border:-border, border:-border]
    return ys, yh


def psnr(sr, hr, border: int = 0) -> float:
    """Returns ``inf`` for identical images; report writers cap it at ``PSNR_CAP``."""
    ys, yh = _prepare(sr, hr, border)
    rmse = math.sqrt(float(np.mean((ys - yh) ** 2)))
    return math.inf if rmse == 0 else 20.0 * math.log10(PEAK / rmse)


def _ssim_terms(mx, my, vx, vy, cxy):
    a1, a2 = (SSIM_K1 * PEAK) ** 2, (SSIM_K2 * PEAK) ** 2
    return ((2 * mx * my + a1) * (2 * cxy + a2)) / ((mx * mx + my * my + a1) * (vx + vy + a2))


def _filter_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    rows = sum(k[i] * a[i:a.shape[0] - n + 1 + i, :] for i in range(n))
    return sum(k[j] * rows[:, j:rows.shape[1] - n + 1 + j] for j in range(n))


def ssim(sr, hr, mode: str = "windowed", border: int = 0) -> float:
    """``global`` uses whole-image statistics; ``windowed`` averages the same
    expression over 11x11 Gaussian (sigma 1.5) neighbourhoods, falling back to
    global statistics for images smaller than the window."""
    x, y = _prepare(sr, hr, border)
    if mode == "global" or min(x.shape) < SSIM_WINDOW:
        if mode not in ("global", "windowed"):
            raise ValueError(f"mode must be 'global' or 'windowed', got {mode!r}")
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        return float(_ssim_terms(mx, my, (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()))
    if mode != "windowed":
        raise ValueError(f"mode must be 'global' or 'windowed', got {mode!r}")
    k = gaussian_kernel1d(SSIM_SIGMA)
    k = k[len(k) // 2 - SSIM_WINDOW // 2: len(k) // 2 + SSIM_WINDOW // 2 + 1]
    k = k / k.sum()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    vx = _filter_valid(x * x, k) - mx * mx
    vy = _filter_valid(y * y, k) - my * my
    cxy = _filter_valid(x * y, k) - mx * my
    return float(np.mean(_ssim_terms(mx, my, vx, vy, cxy)))
