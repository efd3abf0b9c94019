"""Straight-line float64 re-implementation with explicit loops over pixels and
windows.  Shares no code with :mod:`estn.ops`; used as an oracle by the
self-check command and the test-suite.  Slow by design."""

from __future__ import annotations

import math

import numpy as np


def _np(t):
    return None if t is None else np.asarray(t.data, dtype=np.float64)


def mirror(k: int, n: int) -> int:
    """Index ``k`` (possibly past the end) folded back into ``[0, n)`` by mirroring."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    r = k % period
    return r if r < n else period - r


def reflect_pad(x, mh, mw):
    c, h, w = x.shape
    hp, wp = -(-h // mh) * mh, -(-w // mw) * mw
    out = np.zeros((c, hp, wp))
    for i in range(hp):
        for j in range(wp):
            out[:, i, j] = x[:, mirror(i, h), mirror(j, w)]
    return out


def conv(x, weight, bias=None, groups=1):
    """Zero-padded 'same' correlation; ``weight`` is ``[Cout, Cin/groups, k, k]``."""
    cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    og = cout // groups
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((cin, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = x
    out = np.zeros((cout, h, w))
    for o in range(cout):
        g = o // og
        for i in range(h):
            for j in range(w):
                patch = xp[g * cg:(g + 1) * cg, i:i + kh, j:j + kw]
                out[o, i, j] = np.sum(weight[o] * patch)
        if bias is not None:
            out[o] += bias[o]
    return out


def conv_w(x, c):
    return conv(x, _np(c.weight), _np(c.bias), c.groups)


def shift(x):
    """Five contiguous channel groups read from center/up/down/left/right neighbours."""
    c, h, w = x.shape
    base, extra = divmod(c, 5)
    offsets = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
    out = np.zeros_like(x)
    ch = 0
    for gi, (oy, ox) in enumerate(offsets):
        for _ in range(base + (1 if gi < extra else 0)):
            for i in range(h):
                for j in range(w):
                    si, sj = i + oy, j + ox
                    if 0 <= si < h and 0 <= sj < w:
                        out[ch, i, j] = x[ch, si, sj]
            ch += 1
    return out


def relu(x):
    return np.maximum(x, 0.0)


def gelu(x):
    return np.vectorize(lambda v: v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def sigmoid(x):
    return np.vectorize(lambda v: 1.0 / (1.0 + math.exp(-v)))(x)


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def local_stage(x, w):
    y = relu(conv_w(shift(x), w.expand))
    return x + conv_w(shift(y), w.compress)


def bsgm(x, w):
    c, h, wd = x.shape
    wh, ww = w.window
    g = math.isqrt(w.block.weight.shape[0])
    th, tw = wh * g, ww * g
    xp = reflect_pad(x, th, tw)
    _, hp, wp = xp.shape
    gamma, beta = _np(w.norm.gamma), _np(w.norm.beta)
    e_w, e_b = _np(w.entry.weight), _np(w.entry.bias)
    x1 = np.zeros((hp, wp, c))
    for i in range(hp):
        for j in range(wp):
            v = xp[:, i, j]
            mu = v.mean()
            var = ((v - mu) ** 2).mean()
            n = (v - mu) / math.sqrt(var + w.norm.eps) * gamma + beta
            x1[i, j] = gelu(e_w @ n + e_b)
    f_w, f_b = _np(w.block.weight), _np(w.block.bias)
    x4 = np.zeros_like(x1)
    for ty in range(hp // th):
        for tx in range(wp // tw):
            for py in range(wh):
                for px in range(ww):
                    # pixel at in-window position (py, px) of every window in this tile
                    cells = [(ty * th + by * wh + py, tx * tw + bx * ww + px) for by in range(g) for bx in range(g)]
                    vals = np.array([x1[r, s] for r, s in cells])  # [B, C]
                    mixed = f_w @ vals + f_b[:, None]
                    for (r, s), row in zip(cells, mixed):
                        x4[r, s] = row
    o_w, o_b = _np(w.exit.weight), _np(w.exit.bias)
    out = np.zeros((c, hp, wp))
    for i in range(hp):
        for j in range(wp):
            out[:, i, j] = o_w @ x4[i, j] + o_b + x1[i, j]
    return out[:, :h, :wd]


def window_attention(x, q, k, v, win, probs=None):
    """Returns ``(output, probs)``; when ``probs`` is given it replaces the Q/K scores."""
    c, h, w = x.shape
    wh, ww = win
    xp = reflect_pad(x, wh, ww)
    _, hp, wp = xp.shape
    V = conv_w(xp, v)
    if probs is None:
        Q, K = conv_w(xp, q), conv_w(xp, k)
    out = np.zeros_like(xp)
    n = wh * ww
    new_probs = []
    b = 0
    for by in range(hp // wh):
        for bx in range(wp // ww):
            cells = [(by * wh + r, bx * ww + s) for r in range(wh) for s in range(ww)]
            if probs is None:
                P = []
                for (i1, j1) in cells:
                    row = [float(Q[:, i1, j1] @ K[:, i2, j2]) / math.sqrt(n) for (i2, j2) in cells]
                    P.append(softmax(row))
                P = np.array(P)
            else:
                P = probs[b]
            new_probs.append(P)
            for t, (i1, j1) in enumerate(cells):
                acc = np.zeros(c)
                for u, (i2, j2) in enumerate(cells):
                    acc += P[t, u] * V[:, i2, j2]
                out[:, i1, j1] = acc
            b += 1
    return out[:, :h, :w], np.array(new_probs)


def roll(x, dy, dx):
    c, h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[:, (i + dy) % h, (j + dx) % w] = x[:, i, j]
    return out


def mssa(x, w, shifted=False, cache=None, shifts=None):
    """Plain (``shifted=False``, fills ``cache``) or shifted multi-scale window attention."""
    c = x.shape[0]
    cg = c // len(w.windows)
    outs = []
    for s, win in enumerate(w.windows):
        part = x[s * cg:(s + 1) * cg]
        if not shifted:
            y, P = window_attention(part, w.q[s], w.k[s], w.v[s], win)
            if cache is not None:
                cache[s] = P
        else:
            dy, dx = shifts[s] if shifts is not None else (win[0] // 2, win[1] // 2)
            p = roll(part, dy, dx)
            y, _ = window_attention(p, w.q[s], w.k[s], w.v[s], win,
                                    probs=cache[s] if w.share_scores else None)
            y = roll(y, -dy, -dx)
        outs.append(y)
    return conv_w(np.concatenate(outs, axis=0), w.merge)


def lrcab(x, w, residual=None):
    t = conv_w(relu(conv_w(x, w.expand)), w.compress)
    pooled = t.mean(axis=(1, 2)).reshape(-1, 1, 1)
    s = sigmoid(conv_w(relu(conv_w(pooled, w.squeeze)), w.excite))
    return s * t + (x if residual is None else residual)


def estm(x, w):
    o1 = local_stage(x, w.local1)
    b0 = bsgm(o1, w.bsgm1) if w.bsgm1 is not None else o1
    cache = {}
    att = mssa(b0, w.mssa, cache=cache)
    o2 = lrcab(att, w.lrcab1) + o1
    o3 = local_stage(o2, w.local2)
    b1 = bsgm(o3, w.bsgm2) if w.bsgm2 is not None else o3
    sw = mssa(b1, w.mssa, shifted=True, cache=cache)
    return lrcab(sw, w.lrcab2, residual=o3)


def pixel_shuffle(x, a):
    cin, h, w = x.shape
    c = cin // (a * a)
    out = np.zeros((c, a * h, a * w))
    for ch in range(c):
        for y in range(h):
            for xx in range(w):
                for dy in range(a):
                    for dx in range(a):
                        out[ch, a * y + dy, a * xx + dx] = x[ch * a * a + dy * a + dx, y, xx]
    return out


def network(weights, lr):
    lr = np.asarray(lr, dtype=np.float64)
    f0 = conv_w(lr, weights.sfem)
    f = f0
    for e in weights.estms:
        f = estm(f, e)
    return pixel_shuffle(conv_w(f + f0, weights.um), weights.cfg.scale)
