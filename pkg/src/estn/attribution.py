"""Local attribution maps: path-integrated input gradients of a regional SR readout."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Tuple, Union

import numpy as np

from . import ops
from .imageio import write_image
from .network import EstnWeights, forward
from .resample import gaussian_blur
from .serialize import atomic_write_bytes
from .tensor import Tensor, backward, no_grad

Region = Tuple[int, int, int, int]  # x, y, width, height in SR pixels


@dataclass
class AttributionMap:
    values: np.ndarray
    region: Region
    steps: int
    sigma: float
    readout_input: float
    readout_baseline: float

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def completeness_residual(self) -> float:
        """``|sum(attribution) - (D(F(input)) - D(F(baseline)))|`` relative to the readout gap."""
        gap = self.readout_input - self.readout_baseline
        err = abs(self.total - gap)
        if gap == 0:
            return 0.0 if err == 0 else float("inf")
        return err / abs(gap)


def region_readout(sr: Tensor, region: Region) -> Tensor:
    """Sum of SR intensities inside ``region``."""
    x, y, w, h = region
    patch = ops.slice_axis(ops.slice_axis(sr, 1, y, y + h), 2, x, x + w)
    return ops.sum_all(patch)


def _check_region(region: Region, sr_shape) -> None:
    x, y, w, h = region
    _, H, W = sr_shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"region {region} outside SR bounds {W}x{H}")


def lam(model: Union[EstnWeights, Callable[[Tensor], Tensor]], lr_img, region: Region,
        steps: int = 50, sigma: float = 2.0) -> AttributionMap:
    """Midpoint-rule integral of gradients along ``blur(lr) -> lr``, channel-summed to ``[H, W]``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = (lambda t: forward(model, t)) if isinstance(model, EstnWeights) else model
    lr = np.asarray(lr_img.data if isinstance(lr_img, Tensor) else lr_img, dtype=np.float64)
    base = gaussian_blur(lr, sigma)
    delta = lr - base
    with no_grad():
        sr_in = f(Tensor(lr))
        _check_region(region, sr_in.shape)
        d_in = float(region_readout(sr_in, region).item())
        d_base = float(region_readout(f(Tensor(base)), region).item())
    grad_sum = np.zeros_like(lr)
    if np.any(delta):
        for m in range(1, steps + 1):
            alpha = (m - 0.5) / steps
            point = Tensor(base + alpha * delta, requires_grad=True)
            out = region_readout(f(point), region)
            if not out.requires_grad:
                raise ValueError("model output does not depend differentiably on its input")
            backward(out)
            grad_sum += point.grad
    values = (grad_sum / steps * delta).sum(axis=0)
    return AttributionMap(values, tuple(region), steps, float(sigma), d_in, d_base)


def heatmap_image(amap: AttributionMap) -> np.ndarray:
    """Red-intensity ``[3, H, W]`` image of ``|values|`` normalised to ``[0, 1]``."""
    mag = np.abs(amap.values)
    peak = mag.max() if mag.size else 0.0
    norm = mag / peak if peak > 0 else np.zeros_like(mag)
    return np.stack([norm, np.zeros_like(norm), np.zeros_like(norm)])


def render_heatmap(amap: AttributionMap, out_path) -> Tuple[Path, Path]:
    """Write the overlay image and a raw CSV grid (same stem, ``.csv``)."""
    out_path = Path(out_path)
    if not np.all(np.isfinite(amap.values)):
        raise ValueError("attribution map has non-finite values")
    write_image(out_path, heatmap_image(amap))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in amap.values])
    csv_path = out_path.with_suffix(".csv")
    atomic_write_bytes(csv_path, buf.getvalue().encode())
    return out_path, csv_path
