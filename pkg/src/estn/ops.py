"""Differentiable primitives.

Image tensors are channel-first ``[C, H, W]``.  Window tensors produced by
:func:`grid_partition` are window-first ``[B, wh*ww, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import Tensor

Number = Union[int, float]
PADDINGS = ("zero", "none", "reflect")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _op(data, parents, backward, name) -> Tensor:
    return Tensor._from_op(data, parents, backward, name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _coerce(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _op(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(a.data * b.data, (a, b), back, "mul")


def absolute(x: Tensor) -> Tensor:
    return _op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _op(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _op(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _op(np.ascontiguousarray(x.data[index]), (x,), back, "slice")


def split(x: Tensor, parts: int, axis: int = 0) -> list:
    n = x.shape[axis]
    if n % parts:
        raise ValueError(f"axis extent {n} not divisible into {parts} parts")
    step = n // parts
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(parts)]


def take_axis(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; the backward pass scatter-adds repeated indices."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim

    def back(g):
        out = np.zeros_like(x.data)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, index, gm)
        return (out,)

    return _op(np.take(x.data, index, axis=axis), (x,), back, "take")


# ---------------------------------------------------------------------------
# padding, shifting, windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropRecord:
    """Original spatial extent before :func:`pad_reflect`."""

    height: int
    width: int
    pad_h: int
    pad_w: int


def reflect_index(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for mirror padding that excludes the border sample.

    Pads longer than the axis fold back repeatedly.
    """
    if before < 0 or after < 0:
        raise ValueError("negative padding")
    if n < 1:
        raise ValueError("empty axis")
    if n == 1 and before + after > 0:
        raise ValueError("cannot reflect-pad an axis of extent 1")
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad_reflect(x: Tensor, to_multiple: Tuple[int, int]) -> Tuple[Tensor, CropRecord]:
    """Mirror-pad the last two axes (bottom/right) up to multiples of ``to_multiple``."""
    mh, mw = to_multiple
    if mh < 1 or mw < 1:
        raise ValueError(f"multiples must be >= 1, got {to_multiple}")
    h, w = x.shape[-2:]
    ph, pw = (-h) % mh, (-w) % mw
    rec = CropRecord(h, w, ph, pw)
    out = x
    if ph:
        out = take_axis(out, reflect_index(h, 0, ph), -2)
    if pw:
        out = take_axis(out, reflect_index(w, 0, pw), -1)
    return out, rec


def crop(x: Tensor, rec: CropRecord) -> Tensor:
    if rec.pad_h == 0 and rec.pad_w == 0:
        return x
    if x.shape[-2:] != (rec.height + rec.pad_h, rec.width + rec.pad_w):
        raise ValueError(f"crop record {rec} does not match shape {x.shape}")
    out = x
    if rec.pad_h:
        out = slice_axis(out, x.ndim - 2, 0, rec.height)
    if rec.pad_w:
        out = slice_axis(out, x.ndim - 1, 0, rec.width)
    return out


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the last two axes: ``out[y, x] = in[y - dy, x - dx]``."""
    shift = (int(dy), int(dx))
    out = np.roll(x.data, shift, axis=(-2, -1))
    back_shift = (-shift[0], -shift[1])
    return _op(out, (x,), lambda g: (np.roll(g, back_shift, axis=(-2, -1)),), "roll")


def grid_partition(x: Tensor, win: Tuple[int, int]) -> Tensor:
    """``[..., H, W, C] -> [..., B, wh*ww, C]`` with windows and in-window positions row-major."""
    wh, ww = win
    *lead, h, w, c = x.shape
    if h % wh or w % ww:
        raise ValueError(f"spatial extent {(h, w)} not divisible by window {win}")
    k = len(lead)
    y = x.data.reshape(*lead, h // wh, wh, w // ww, ww, c)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    out = y.transpose(perm).reshape(*lead, (h // wh) * (w // ww), wh * ww, c)

    def back(g):
        gy = g.reshape(*lead, h // wh, w // ww, wh, ww, c).transpose(perm)
        return (np.ascontiguousarray(gy).reshape(x.shape),)

    return _op(np.ascontiguousarray(out), (x,), back, "grid_partition")


def grid_merge(x: Tensor, win: Tuple[int, int], size: Tuple[int, int]) -> Tensor:
    """Inverse of :func:`grid_partition` for an ``H x W`` map."""
    wh, ww = win
    h, w = size
    *lead, b, n, c = x.shape
    if h % wh or w % ww or b != (h // wh) * (w // ww) or n != wh * ww:
        raise ValueError(f"window tensor {x.shape} does not tile {size} with window {win}")
    k = len(lead)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    out = x.data.reshape(*lead, h // wh, w // ww, wh, ww, c).transpose(perm).reshape(*lead, h, w, c)

    def back(g):
        gy = g.reshape(*lead, h // wh, wh, w // ww, ww, c).transpose(perm)
        return (np.ascontiguousarray(gy).reshape(x.shape),)

    return _op(np.ascontiguousarray(out), (x,), back, "grid_merge")


def pixel_shuffle(x: Tensor, a: int) -> Tensor:
    """``[c*a*a, H, W] -> [c, a*H, a*W]`` with ``out[ch, a*y+dy, a*x+dx] = in[ch*a*a + dy*a + dx, y, x]``."""
    cin, h, w = x.shape
    if a < 1 or cin % (a * a):
        raise ValueError(f"channel count {cin} not divisible by {a}^2")
    c = cin // (a * a)
    out = x.data.reshape(c, a, a, h, w).transpose(0, 3, 1, 4, 2).reshape(c, a * h, a * w)

    def back(g):
        gi = g.reshape(c, h, a, w, a).transpose(0, 2, 4, 1, 3).reshape(x.shape)
        return (np.ascontiguousarray(gi),)

    return _op(np.ascontiguousarray(out), (x,), back, "pixel_shuffle")


# ---------------------------------------------------------------------------
# convolutions and dense maps
# ---------------------------------------------------------------------------

def _check_padding(padding: str) -> None:
    if padding not in PADDINGS:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _same_reflect(x: Tensor, ph: int, pw: int) -> Tensor:
    h, w = x.shape[-2:]
    if ph:
        x = take_axis(x, reflect_index(h, ph, ph), -2)
    if pw:
        x = take_axis(x, reflect_index(w, pw, pw), -1)
    return x


def _scatter_windows(dcols: np.ndarray, hp: int, wp: int) -> np.ndarray:
    # dcols: [C, kh, kw, Ho, Wo] -> gradient w.r.t. the padded input [C, hp, wp]
    c, kh, kw, ho, wo = dcols.shape
    out = np.zeros((c, hp, wp), dtype=dcols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky:ky + ho, kx:kx + wo] += dcols[:, ky, kx]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[Cin, H, W]`` with ``weight[Cout, Cin/groups, kh, kw]``."""
    _check_padding(padding)
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d expects [C,H,W] input and 4-D kernel, got {x.shape}, {weight.shape}")
    cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if h < 1 or w < 1:
        raise ValueError("conv2d input has empty spatial extent")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {(kh, kw)}")
    if cin_g * groups != cin or cout % groups:
        raise ValueError(f"channel mismatch: input {cin}, kernel {weight.shape}, groups {groups}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    ph, pw = (kh // 2, kw // 2) if padding != "none" else (0, 0)
    if padding == "reflect":
        x = _same_reflect(x, ph, pw)
        ph = pw = 0
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    hp, wp = xp.shape[1:]
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than (padded) input")
    g, cout_g = groups, cout // groups
    pointwise = kh == 1 and kw == 1
    if pointwise:
        cols = None
        if g == 1:
            out = np.tensordot(wd[:, :, 0, 0], xp, axes=([1], [0]))
        else:
            out = np.einsum("goi,gihw->gohw", wd[:, :, 0, 0].reshape(g, cout_g, cin_g),
                            xp.reshape(g, cin_g, ho, wo)).reshape(cout, ho, wo)
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [Cin, Ho, Wo, kh, kw]
        if g == 1:
            out = np.tensordot(wd, cols, axes=([1, 2, 3], [0, 3, 4]))
        else:
            out = np.einsum("goikl,gihwkl->gohw", wd.reshape(g, cout_g, cin_g, kh, kw),
                            cols.reshape(g, cin_g, ho, wo, kh, kw), optimize=True).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def back(gout):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(1, 2))
        if pointwise:
            if weight.requires_grad:
                if g == 1:
                    gw = np.tensordot(gout, xp, axes=([1, 2], [1, 2]))[:, :, None, None]
                else:
                    gw = np.einsum("gohw,gihw->goi", gout.reshape(g, cout_g, ho, wo),
                                   xp.reshape(g, cin_g, ho, wo)).reshape(cout, cin_g, 1, 1)
            if x.requires_grad:
                if g == 1:
                    gxp = np.tensordot(wd[:, :, 0, 0], gout, axes=([0], [0]))
                else:
                    gxp = np.einsum("goi,gohw->gihw", wd[:, :, 0, 0].reshape(g, cout_g, cin_g),
                                    gout.reshape(g, cout_g, ho, wo)).reshape(cin, ho, wo)
                gx = gxp[:, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        else:
            if weight.requires_grad:
                if g == 1:
                    gw = np.tensordot(gout, cols, axes=([1, 2], [1, 2]))
                else:
                    gw = np.einsum("gohw,gihwkl->goikl", gout.reshape(g, cout_g, ho, wo),
                                   cols.reshape(g, cin_g, ho, wo, kh, kw), optimize=True).reshape(weight.shape)
            if x.requires_grad:
                if g == 1:
                    dcols = np.tensordot(wd, gout, axes=([0], [0]))  # [Cin, kh, kw, Ho, Wo]
                else:
                    dcols = np.einsum("goikl,gohw->giklhw", wd.reshape(g, cout_g, cin_g, kh, kw),
                                      gout.reshape(g, cout_g, ho, wo), optimize=True)
                    dcols = dcols.reshape(cin, kh, kw, ho, wo)
                gxp = _scatter_windows(dcols, hp, wp)
                gx = gxp[:, ph:hp - ph, pw:wp - pw]
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, parents, back, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: str = "zero") -> Tensor:
    """Channel ``c`` of the output is ``x[c]`` correlated with ``kernel[c]``."""
    _check_padding(padding)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ValueError(f"depthwise_conv2d expects [C,H,W] and [C,kh,kw], got {x.shape}, {kernel.shape}")
    c, h, w = x.shape
    kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"kernel has {kc} channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {(kh, kw)}")
    ph, pw = (kh // 2, kw // 2) if padding != "none" else (0, 0)
    if padding == "reflect":
        x = _same_reflect(x, ph, pw)
        ph = pw = 0
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[1:]
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    kd = kernel.data
    out = np.einsum("ckl,chwkl->chw", kd, cols, optimize=True)

    def back(g):
        gk = np.einsum("chw,chwkl->ckl", g, cols, optimize=True) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = kd[:, :, :, None, None] * g[:, None, None, :, :]
            gx = np.ascontiguousarray(_scatter_windows(dcols, hp, wp)[:, ph:hp - ph, pw:wp - pw])
        return gx, gk

    return _op(np.ascontiguousarray(out, dtype=x.dtype), (x, kernel), back, "depthwise_conv2d")


def dense(x: Tensor, axis: int, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply ``weight[out, in]`` along ``axis``; every other axis is a batch axis."""
    axis = axis % x.ndim
    n_out, n_in = weight.shape
    if x.shape[axis] != n_in:
        raise ValueError(f"dense: axis {axis} has extent {x.shape[axis]}, weights expect {n_in}")
    if bias is not None and bias.shape != (n_out,):
        raise ValueError(f"bias shape {bias.shape} != ({n_out},)")
    xm = np.moveaxis(x.data, axis, -1)
    y = xm @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(np.moveaxis(y, -1, axis))

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.ascontiguousarray(np.moveaxis(gm @ weight.data, -1, axis)) if x.requires_grad else None
        gw = gm.reshape(-1, n_out).T @ xm.reshape(-1, n_in) if weight.requires_grad else None
        gb = gm.reshape(-1, n_out).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, parents, back, "dense")


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 1:
        raise ValueError("layer_norm over an empty axis")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape ({n},)")
    xm = np.moveaxis(x.data, axis, -1)
    mu = xm.mean(axis=-1, keepdims=True)
    xc = xm - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    out = np.ascontiguousarray(np.moveaxis(y, -1, axis).astype(x.dtype, copy=False))

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (gm * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = gm.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = gm * gamma.data
            gxm = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = np.ascontiguousarray(np.moveaxis(gxm, -1, axis))
        return gx, gg, gb

    return _op(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------------------
# activations and attention pieces
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _op((xd * cdf).astype(x.dtype, copy=False), (x,), back, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(scores: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    if scores.shape[-1] < 1:
        raise ValueError("softmax over an empty row")
    z = scores.data - scores.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _op(p, (scores,), back, "softmax")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``[..., n, k] @ [..., k, m]``; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _op(a.data @ b.data, (a, b), back, "matmul")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[C, H, W] -> [C, 1, 1]`` spatial mean."""
    c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool over an empty map")
    out = x.data.mean(axis=(1, 2), keepdims=True)
    return _op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gap")
