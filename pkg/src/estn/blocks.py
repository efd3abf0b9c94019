"""ESTM building blocks: shift-conv local stages, BSGM, multi-scale window
attention (plain and shifted), LRCAB, and their four-stage composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor

Window = Tuple[int, int]

# (ky, kx) tap in a 3x3 kernel for each shift group: center, up, down, left, right.
SHIFT_TAPS = ((1, 1), (0, 1), (2, 1), (1, 0), (1, 2))
LRCAB_VARIANTS = ("original", "two_1x1", "two_3x3", "lrcab")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class Conv:
    weight: Tensor
    bias: Optional[Tensor] = None
    groups: int = 1
    padding: str = "zero"

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.padding, self.groups)


@dataclass
class Dense:
    weight: Tensor
    bias: Optional[Tensor] = None

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return ops.dense(x, axis, self.weight, self.bias)


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class LocalStageWeights:
    expand: Conv
    compress: Conv


@dataclass
class BsgmWeights:
    norm: Norm
    entry: Dense
    block: Dense
    exit: Dense
    window: Window = (4, 4)

    @property
    def trained_block_count(self) -> int:
        return self.block.weight.shape[0]


@dataclass
class MssaWeights:
    q: List[Conv]
    k: List[Conv]
    v: List[Conv]
    merge: Conv
    windows: Tuple[Window, ...] = ((4, 4), (8, 8), (16, 16))
    share_scores: bool = True


@dataclass
class LrcabWeights:
    expand: Conv
    compress: Conv
    squeeze: Conv
    excite: Conv
    variant: str = "lrcab"


@dataclass
class EstmWeights:
    local1: LocalStageWeights
    bsgm1: Optional[BsgmWeights]
    mssa: MssaWeights
    lrcab1: LrcabWeights
    local2: LocalStageWeights
    bsgm2: Optional[BsgmWeights]
    lrcab2: LrcabWeights


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor in a weights tree, in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_conv(rng, cin: int, cout: int, k: int = 1, groups: int = 1) -> Conv:
    fan_in = (cin // groups) * k * k
    return Conv(_uniform(rng, (cout, cin // groups, k, k), fan_in), _uniform(rng, (cout,), fan_in), groups)


def init_dense(rng, n_in: int, n_out: int) -> Dense:
    return Dense(_uniform(rng, (n_out, n_in), n_in), _uniform(rng, (n_out,), n_in))


def init_local_stage(rng, c: int) -> LocalStageWeights:
    return LocalStageWeights(init_conv(rng, c, 2 * c), init_conv(rng, 2 * c, c))


def init_bsgm(rng, c: int, window: Window = (4, 4), blocks: int = 16) -> BsgmWeights:
    norm = Norm(Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True))
    return BsgmWeights(norm, init_dense(rng, c, c), init_dense(rng, blocks, blocks), init_dense(rng, c, c), tuple(window))


def init_mssa(rng, c: int, windows=((4, 4), (8, 8), (16, 16)), share_scores: bool = True) -> MssaWeights:
    if c % len(windows):
        raise ValueError(f"channel count {c} not divisible by {len(windows)} scales")
    cg = c // len(windows)
    q = [init_conv(rng, cg, cg) for _ in windows]
    k = [init_conv(rng, cg, cg) for _ in windows]
    v = [init_conv(rng, cg, cg) for _ in windows]
    return MssaWeights(q, k, v, init_conv(rng, c, c), tuple(tuple(w) for w in windows), share_scores)


def init_lrcab(rng, c: int, variant: str = "lrcab", ratio: int = 2) -> LrcabWeights:
    """Feature transform before the channel gate, per variant:

    - ``lrcab``: 1x1 C->2C, 3x3 2C->C grouped so each output channel reads two expanded channels
    - ``two_1x1``: 1x1 C->2C, 1x1 2C->C
    - ``two_3x3``: grouped 3x3 C->2C, grouped 3x3 2C->C
    - ``original``: full 3x3 C->C twice (plain RCAB)
    """
    if c % ratio:
        raise ValueError(f"channel count {c} not divisible by attention ratio {ratio}")
    if variant == "lrcab":
        expand, compress = init_conv(rng, c, 2 * c, 1), init_conv(rng, 2 * c, c, 3, groups=c)
    elif variant == "two_1x1":
        expand, compress = init_conv(rng, c, 2 * c, 1), init_conv(rng, 2 * c, c, 1)
    elif variant == "two_3x3":
        expand, compress = init_conv(rng, c, 2 * c, 3, groups=c), init_conv(rng, 2 * c, c, 3, groups=c)
    elif variant == "original":
        expand, compress = init_conv(rng, c, c, 3), init_conv(rng, c, c, 3)
    else:
        raise ValueError(f"unknown LRCAB variant {variant!r}; expected one of {LRCAB_VARIANTS}")
    return LrcabWeights(expand, compress, init_conv(rng, c, c // ratio), init_conv(rng, c // ratio, c), variant)


def init_estm(rng, c: int, *, windows=((4, 4), (8, 8), (16, 16)), bsgm_window: Window = (4, 4),
              bsgm_blocks: int = 16, bsgm_enabled: bool = True, lrcab_variant: str = "lrcab",
              share_scores: bool = True) -> EstmWeights:
    local1 = init_local_stage(rng, c)
    bsgm1 = init_bsgm(rng, c, bsgm_window, bsgm_blocks) if bsgm_enabled else None
    mssa = init_mssa(rng, c, windows, share_scores)
    lrcab1 = init_lrcab(rng, c, lrcab_variant)
    local2 = init_local_stage(rng, c)
    bsgm2 = init_bsgm(rng, c, bsgm_window, bsgm_blocks) if bsgm_enabled else None
    lrcab2 = init_lrcab(rng, c, lrcab_variant)
    return EstmWeights(local1, bsgm1, mssa, lrcab1, local2, bsgm2, lrcab2)


# ---------------------------------------------------------------------------
# stage 1 / 3: shift convolution
# ---------------------------------------------------------------------------

def shift_groups(channels: int) -> List[int]:
    """Five contiguous group sizes (center, up, down, left, right) covering ``channels``."""
    base, extra = divmod(channels, len(SHIFT_TAPS))
    return [base + (1 if i < extra else 0) for i in range(len(SHIFT_TAPS))]


@lru_cache(maxsize=64)
def _shift_kernel_array(channels: int) -> np.ndarray:
    k = np.zeros((channels, 3, 3))
    start = 0
    for (ky, kx), n in zip(SHIFT_TAPS, shift_groups(channels)):
        k[start:start + n, ky, kx] = 1.0
        start += n
    k.setflags(write=False)
    return k


def shift_kernel(channels: int) -> Tensor:
    """Fixed one-hot depthwise kernel ``[C, 3, 3]``; never a learnable parameter."""
    return Tensor(_shift_kernel_array(channels))


def shift_conv(x: Tensor) -> Tensor:
    return ops.depthwise_conv2d(x, shift_kernel(x.shape[0]), "zero")


def local_stage(x: Tensor, w: LocalStageWeights) -> Tensor:
    y = ops.relu(w.expand(shift_conv(x)))
    return x + w.compress(shift_conv(y))


# ---------------------------------------------------------------------------
# stage 2 / 4: block sparse global awareness
# ---------------------------------------------------------------------------

def bsgm_tile(w: BsgmWeights) -> Window:
    """Tile extent whose window grid matches the trained block-axis dense."""
    b = w.trained_block_count
    g = math.isqrt(b)
    if g * g != b:
        raise ValueError(f"block-axis dense of size {b} is not a square window grid")
    return (w.window[0] * g, w.window[1] * g)


def bsgm_forward(x: Tensor, w: BsgmWeights) -> Tensor:
    """LN -> channel dense -> GELU, then mix same-position pixels across the
    windows of each tile with the block-axis dense, channel dense, residual.

    Inputs larger than one tile are reflect-padded and processed tile by tile.
    """
    c = x.shape[0]
    th, tw = bsgm_tile(w)
    xp, rec = ops.pad_reflect(x, (th, tw))
    h, wd = xp.shape[1:]
    x0 = ops.transpose(xp, (1, 2, 0))
    x1 = ops.gelu(w.entry(ops.layer_norm(x0, -1, w.norm.gamma, w.norm.beta, w.norm.eps)))
    tiles = ops.reshape(ops.grid_partition(x1, (th, tw)), (-1, th, tw, c))
    x2 = ops.grid_partition(tiles, w.window)
    if x2.shape[1] != w.trained_block_count:
        raise ValueError(f"block count {x2.shape[1]} != trained {w.trained_block_count}")
    x3 = w.block(x2, axis=1)
    x4 = ops.grid_merge(x3, w.window, (th, tw))
    x4 = ops.grid_merge(ops.reshape(x4, (-1, th * tw, c)), (th, tw), (h, wd))
    x5 = w.exit(x4) + x1
    return ops.crop(ops.transpose(x5, (2, 0, 1)), rec)


# ---------------------------------------------------------------------------
# stage 2 / 4: window multi-scale self-attention
# ---------------------------------------------------------------------------

class AttentionCache:
    """Post-softmax window probabilities from W-MSSA, keyed by scale index."""

    def __init__(self):
        self._store: Dict[int, Tuple[Tensor, ops.CropRecord]] = {}

    def store(self, slot: int, probs: Tensor, rec: ops.CropRecord) -> None:
        self._store[slot] = (probs, rec)

    def get(self, slot: int) -> Tuple[Tensor, ops.CropRecord]:
        if slot not in self._store:
            raise KeyError(f"attention cache has no entry for scale {slot}")
        return self._store[slot]

    def __contains__(self, slot: int) -> bool:
        return slot in self._store

    def __len__(self) -> int:
        return len(self._store)


def _to_windows(t: Tensor, win: Window) -> Tensor:
    return ops.grid_partition(ops.transpose(t, (1, 2, 0)), win)


def window_attention(x: Tensor, q: Optional[Conv], k: Optional[Conv], v: Conv, win: Window,
                     cache: Optional[AttentionCache] = None, slot: int = 0, mode: str = "compute") -> Tensor:
    xp, rec = ops.pad_reflect(x, win)
    c, h, w = xp.shape
    n = win[0] * win[1]
    vw = _to_windows(v(xp), win)
    if mode == "compute":
        qw = _to_windows(q(xp), win)
        kw = _to_windows(k(xp), win)
        scores = ops.matmul(qw, ops.transpose(kw, (0, 2, 1))) * (1.0 / math.sqrt(n))
        probs = ops.softmax_rows(scores)
        if cache is not None:
            cache.store(slot, probs, rec)
    elif mode == "reuse":
        if cache is None:
            raise ValueError("reuse mode needs an attention cache")
        probs, cached_rec = cache.get(slot)
        if cached_rec != rec or probs.shape != (vw.shape[0], n, n):
            raise ValueError(f"cached attention {probs.shape} does not match geometry {(vw.shape[0], n, n)}")
    else:
        raise ValueError(f"mode must be 'compute' or 'reuse', got {mode!r}")
    out = ops.grid_merge(ops.matmul(probs, vw), win, (h, w))
    return ops.crop(ops.transpose(out, (2, 0, 1)), rec)


def w_mssa_forward(x: Tensor, w: MssaWeights, cache: Optional[AttentionCache] = None) -> Tensor:
    parts = ops.split(x, len(w.windows), axis=0)
    outs = [window_attention(p, w.q[s], w.k[s], w.v[s], w.windows[s], cache, s, "compute")
            for s, p in enumerate(parts)]
    return w.merge(ops.concat(outs, axis=0))


def sw_mssa_forward(x: Tensor, w: MssaWeights, cache: Optional[AttentionCache] = None,
                    shifts: Optional[Sequence[Tuple[int, int]]] = None) -> Tensor:
    """Shift each scale group by half its window, attend, shift back.

    With ``share_scores`` the window probabilities come from ``cache``
    (filled by :func:`w_mssa_forward` of the same module) and only V is computed.
    """
    parts = ops.split(x, len(w.windows), axis=0)
    outs = []
    for s, p in enumerate(parts):
        wh, ww = w.windows[s]
        dy, dx = shifts[s] if shifts is not None else (wh // 2, ww // 2)
        shifted = ops.cyclic_shift(p, dy, dx)
        if w.share_scores:
            if cache is None or s not in cache:
                raise ValueError("score sharing needs the W-MSSA attention cache")
            y = window_attention(shifted, None, None, w.v[s], w.windows[s], cache, s, "reuse")
        else:
            y = window_attention(shifted, w.q[s], w.k[s], w.v[s], w.windows[s], None, s, "compute")
        outs.append(ops.cyclic_shift(y, -dy, -dx))
    return w.merge(ops.concat(outs, axis=0))


# ---------------------------------------------------------------------------
# low-parameter residual channel attention
# ---------------------------------------------------------------------------

def channel_gate(t: Tensor, w: LrcabWeights) -> Tensor:
    """Per-channel sigmoid weights ``[C, 1, 1]`` from globally pooled features."""
    return ops.sigmoid(w.excite(ops.relu(w.squeeze(ops.global_avg_pool(t)))))


def lrcab_forward(x: Tensor, w: LrcabWeights, residual: Optional[Tensor] = None) -> Tensor:
    """``gate(t) * t + residual`` with ``t = compress(relu(expand(x)))``; residual defaults to ``x``."""
    t = w.compress(ops.relu(w.expand(x)))
    return channel_gate(t, w) * t + (x if residual is None else residual)


# ---------------------------------------------------------------------------
# the four-stage module
# ---------------------------------------------------------------------------

def estm_forward(x: Tensor, w: EstmWeights) -> Tensor:
    o1 = local_stage(x, w.local1)
    b0 = bsgm_forward(o1, w.bsgm1) if w.bsgm1 is not None else o1
    cache = AttentionCache()
    att = w_mssa_forward(b0, w.mssa, cache)
    o2 = lrcab_forward(att, w.lrcab1) + o1
    o3 = local_stage(o2, w.local2)
    b1 = bsgm_forward(o3, w.bsgm2) if w.bsgm2 is not None else o3
    sw = sw_mssa_forward(b1, w.mssa, cache)
    return lrcab_forward(sw, w.lrcab2, residual=o3)
