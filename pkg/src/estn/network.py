"""Full network: shallow 3x3 conv, a chain of ESTMs, conv + pixel-shuffle upsampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .blocks import (LRCAB_VARIANTS, Conv, EstmWeights, estm_forward, init_conv, init_estm, named_tensors)
from .tensor import Tensor

Window = Tuple[int, int]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 60
    blocks: int = 12
    scale: int = 4
    mssa_windows: Tuple[Window, ...] = ((4, 4), (8, 8), (16, 16))
    bsgm_window: Window = (4, 4)
    bsgm_tile: int = 16
    train_patch: int = 64
    bsgm_enabled: bool = True
    lrcab_variant: str = "lrcab"
    share_scores: bool = True
    attention_ratio: int = 2

    def validate(self) -> "ModelConfig":
        if self.channels < 1 or self.channels % len(self.mssa_windows):
            raise ConfigError(f"channels={self.channels} must be positive and divisible by {len(self.mssa_windows)}")
        if self.channels % self.attention_ratio:
            raise ConfigError(f"channels={self.channels} not divisible by attention ratio {self.attention_ratio}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        areas = [h * w for h, w in self.mssa_windows]
        if any(h < 1 or w < 1 for h, w in self.mssa_windows) or areas != sorted(set(areas)):
            raise ConfigError(f"mssa_windows must be positive and strictly increasing, got {self.mssa_windows}")
        wh, ww = self.bsgm_window
        if wh < 1 or ww < 1 or self.bsgm_tile % wh or self.bsgm_tile % ww or self.bsgm_tile // wh != self.bsgm_tile // ww:
            raise ConfigError(f"bsgm_tile={self.bsgm_tile} must hold the same whole number of {self.bsgm_window} windows per side")
        if self.lrcab_variant not in LRCAB_VARIANTS:
            raise ConfigError(f"lrcab_variant must be one of {LRCAB_VARIANTS}, got {self.lrcab_variant!r}")
        return self

    @property
    def bsgm_blocks(self) -> int:
        return (self.bsgm_tile // self.bsgm_window[0]) ** 2


@dataclass
class EstnWeights:
    cfg: ModelConfig
    sfem: Conv
    estms: List[EstmWeights]
    um: Conv

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from named_tensors(self.sfem, "sfem")
        yield from named_tensors(self.estms, "estms")
        yield from named_tensors(self.um, "um")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def build_model(cfg: ModelConfig, seed: int = 0) -> EstnWeights:
    cfg.validate()
    rng = np.random.default_rng(seed)
    c = cfg.channels
    sfem = init_conv(rng, 3, c, 3)
    estms = [init_estm(rng, c, windows=cfg.mssa_windows, bsgm_window=cfg.bsgm_window,
                       bsgm_blocks=cfg.bsgm_blocks, bsgm_enabled=cfg.bsgm_enabled,
                       lrcab_variant=cfg.lrcab_variant, share_scores=cfg.share_scores)
             for _ in range(cfg.blocks)]
    um = init_conv(rng, c, 3 * cfg.scale ** 2, 3)
    return EstnWeights(cfg, sfem, estms, um)


def forward(w: EstnWeights, lr: Tensor) -> Tensor:
    """``[3, H, W] -> [3, aH, aW]``: shuffle(conv(deep + shallow))."""
    if lr.ndim != 3 or lr.shape[0] != 3:
        raise ValueError(f"expected an RGB [3, H, W] tensor, got {lr.shape}")
    if lr.shape[1] < 2 or lr.shape[2] < 2:
        raise ValueError(f"input must be at least 2x2, got {lr.shape[1:]}")
    shallow = w.sfem(lr)
    feat = shallow
    for block in w.estms:
        feat = estm_forward(feat, block)
    return ops.pixel_shuffle(w.um(feat + shallow), w.cfg.scale)


def count_params(w: EstnWeights) -> int:
    """Learnable scalars; the fixed shift kernels are not parameters."""
    return sum(t.size for t in w.parameters())


# ---------------------------------------------------------------------------
# FLOP model
# ---------------------------------------------------------------------------

def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _flops_per_mac(convention: str) -> int:
    if convention not in ("mac", "2mac"):
        raise ValueError(f"convention must be 'mac' or '2mac', got {convention!r}")
    return 1 if convention == "mac" else 2


def conv_flops(cin: int, cout: int, ksize: int = 1, groups: int = 1, pixels: int = 1,
               convention: str = "mac") -> int:
    """Operation count of one ``ksize x ksize`` convolution over ``pixels`` output positions."""
    return _flops_per_mac(convention) * pixels * cout * (cin // groups) * ksize * ksize


def flop_breakdown(cfg: ModelConfig, out_resolution: Tuple[int, int] = (1280, 720),
                   convention: str = "mac") -> Dict[str, float]:
    """Per-component operation counts for one image whose SR output is ``(width, height)``.

    Only multiply-accumulate work is counted: convolutions, dense maps and the
    two attention products.  Normalisation, activations, softmax, pooling,
    elementwise residuals and the fixed shift taps (pure data movement) are free.
    ``convention="mac"`` reports one FLOP per MAC, ``"2mac"`` two.
    """
    k = _flops_per_mac(convention)
    cfg.validate()
    a, c = cfg.scale, cfg.channels
    width, height = out_resolution
    h, w = math.ceil(height / a), math.ceil(width / a)
    px = h * w

    def conv(cin, cout, ks=1, groups=1, pixels=px):
        return conv_flops(cin, cout, ks, groups, pixels, convention)

    def lrcab():
        v = cfg.lrcab_variant
        if v == "lrcab":
            body = conv(c, 2 * c) + conv(2 * c, c, 3, c)
        elif v == "two_1x1":
            body = conv(c, 2 * c) + conv(2 * c, c)
        elif v == "two_3x3":
            body = conv(c, 2 * c, 3, c) + conv(2 * c, c, 3, c)
        else:
            body = conv(c, c, 3) + conv(c, c, 3)
        r = c // cfg.attention_ratio
        return body + conv(c, r, pixels=1) + conv(r, c, pixels=1)

    def bsgm():
        t = cfg.bsgm_tile
        padded = _ceil_to(h, t) * _ceil_to(w, t)
        return k * padded * (2 * c * c + c * cfg.bsgm_blocks)

    def mssa(reuse: bool):
        d = c // len(cfg.mssa_windows)
        total = conv(c, c)  # merge
        for wh, ww in cfg.mssa_windows:
            n = wh * ww
            padded = _ceil_to(h, wh) * _ceil_to(w, ww)
            windows = padded // n
            projections = 1 if reuse else 3
            total += k * padded * projections * d * d
            total += k * windows * n * n * d * (1 if reuse else 2)
        return total

    local = conv(c, 2 * c) + conv(2 * c, c)
    per_estm = {
        "local": 2 * local,
        "bsgm": 2 * bsgm() if cfg.bsgm_enabled else 0,
        "w_mssa": mssa(reuse=False),
        "sw_mssa": mssa(reuse=cfg.share_scores),
        "lrcab": 2 * lrcab(),
    }
    out = {"sfem": float(conv(3, c, 3))}
    for name, v in per_estm.items():
        out[f"estm.{name}"] = float(cfg.blocks * v)
    out["um"] = float(conv(c, 3 * a * a, 3))
    return out


def estimate_flops(cfg: ModelConfig, out_resolution: Tuple[int, int] = (1280, 720),
                   convention: str = "mac") -> float:
    return float(sum(flop_breakdown(cfg, out_resolution, convention).values()))
