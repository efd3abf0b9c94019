"""Named invariant checks behind ``estn check``.

Each check takes a seeded generator and returns a measured error; it passes
when the error is at most its tolerance (0.0 for bit-exact checks).  Checks
carry tags so ``--filter`` can select e.g. every ``attention`` check.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks, ops, reference
from .gradcheck import finite_diff_check
from .metrics import psnr, ssim
from .network import ModelConfig, build_model, count_params, estimate_flops, forward
from .tensor import Tensor, backward, no_grad, precision

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-5


@dataclass(frozen=True)
class Check:
    name: str
    tags: Tuple[str, ...]
    fn: Callable[[np.random.Generator], float]
    tol: float = 0.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tol: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} {self.name}  error={self.error:.3g} tol={self.tol:g}  ({self.seconds:.2f}s)"
        return msg + (f"  {self.detail}" if self.detail else "")


REGISTRY: Dict[str, Check] = {}


def check(name: str, *tags: str, tol: float = 0.0):
    def register(fn):
        REGISTRY[name] = Check(name, (name.split(".")[0],) + tags, fn, tol)
        return fn
    return register


def _rel(a, b) -> float:
    """Largest deviation relative to the larger magnitude of either array."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _probe(rng, shape):
    """Fixed random weighting turning a tensor-valued op into a scalar readout."""
    m = Tensor(rng.normal(size=shape))
    return lambda y: ops.sum_all(ops.mul(y, m))


def _grad(rng, op, shape, out_shape=None, positive_away_from_zero=False) -> float:
    x = rng.normal(size=shape)
    if positive_away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    with precision(np.float64), no_grad():
        out_shape = op(Tensor(x)).shape if out_shape is None else out_shape
    read = _probe(rng, out_shape)
    return finite_diff_check(lambda t: read(op(t)), x)


def _tiny_cfg(**kw) -> ModelConfig:
    base = dict(channels=6, blocks=1, scale=2, bsgm_tile=8)
    base.update(kw)
    return ModelConfig(**base)


def _to64(w):
    for p in w.parameters():
        p.data = p.data.astype(np.float64)
    return w


def _randomize_ln(rng, w):
    """Non-trivial LayerNorm affine terms so their gradients are exercised."""
    for name, p in w.named_parameters():
        if ".norm." in name:
            p.data = 1.0 + 0.3 * rng.normal(size=p.shape) if name.endswith("gamma") else 0.3 * rng.normal(size=p.shape)
    return w


# ---------------------------------------------------------------------------
# gradients of primitives
# ---------------------------------------------------------------------------

# name -> (op(t, *consts), const shapes, input shape)
GRAD_CASES = {
    "add": (lambda t, a: ops.add(t, a), [(1, 4)], (3, 4)),
    "sub": (lambda t, a: ops.sub(a, t), [(3, 1)], (3, 4)),
    "mul": (lambda t, m: ops.mul(t, ops.mul(t, m)), [(4,)], (3, 4)),
    "absolute": (ops.absolute, [], (3, 4)),
    "reshape": (lambda t: ops.reshape(t, (4, 3)), [], (3, 4)),
    "transpose": (lambda t: ops.transpose(t, (2, 0, 1)), [], (2, 3, 4)),
    "concat": (lambda t: ops.concat([t, ops.mul(t, t)], axis=1), [], (2, 3)),
    "slice_axis": (lambda t: ops.slice_axis(t, 1, 1, 3), [], (2, 4)),
    "take_axis": (lambda t: ops.take_axis(t, np.array([0, 2, 2, 1]), 1), [], (2, 3)),
    "pad_reflect": (lambda t: ops.pad_reflect(t, (4, 4))[0], [], (2, 5, 3)),
    "crop": (lambda t: ops.crop(t, ops.CropRecord(3, 2, 1, 2)), [], (2, 4, 4)),
    "cyclic_shift": (lambda t: ops.cyclic_shift(t, 2, -1), [], (2, 4, 5)),
    "grid_partition": (lambda t: ops.grid_partition(t, (2, 2)), [], (4, 6, 2)),
    "grid_merge": (lambda t: ops.grid_merge(t, (2, 2), (4, 6)), [], (6, 4, 2)),
    "pixel_shuffle": (lambda t: ops.pixel_shuffle(t, 2), [], (8, 3, 2)),
    "conv2d_zero": (lambda t, w, b: ops.conv2d(t, w, b), [(3, 2, 3, 3), (3,)], (2, 5, 4)),
    "conv2d_reflect": (lambda t, w: ops.conv2d(t, w, None, "reflect"), [(2, 2, 3, 3)], (2, 4, 5)),
    "conv2d_grouped": (lambda t, w: ops.conv2d(t, w, None, groups=2), [(2, 2, 3, 3)], (4, 4, 4)),
    "conv2d_1x1": (lambda t, w, b: ops.conv2d(t, w, b), [(3, 2, 1, 1), (3,)], (2, 3, 4)),
    "conv2d_weight": (lambda t, x, b: ops.conv2d(x, t, b), [(2, 4, 4), (3,)], (3, 2, 3, 3)),
    "conv2d_bias": (lambda t, x, w: ops.conv2d(x, w, t), [(2, 4, 4), (3, 2, 3, 3)], (3,)),
    "depthwise_conv2d": (lambda t, k: ops.depthwise_conv2d(t, k), [(3, 3, 3)], (3, 4, 4)),
    "depthwise_kernel": (lambda t, x: ops.depthwise_conv2d(x, t), [(3, 4, 4)], (3, 3, 3)),
    "dense": (lambda t, w, b: ops.dense(t, 1, w, b), [(5, 4), (5,)], (2, 4, 3)),
    "dense_weight": (lambda t, x: ops.dense(x, 1, t), [(2, 4, 3)], (5, 4)),
    "layer_norm": (lambda t, g, b: ops.layer_norm(t, -1, g, b), [(5,), (5,)], (3, 5)),
    "layer_norm_affine": (lambda t, x: ops.layer_norm(x, -1, t, t), [(3, 5)], (5,)),
    "relu": (ops.relu, [], (3, 4)),
    "gelu": (lambda t: ops.gelu(t), [], (3, 4)),
    "sigmoid": (ops.sigmoid, [], (3, 4)),
    "softmax_rows": (lambda t: ops.softmax_rows(t), [], (2, 3, 5)),
    "matmul": (lambda t: ops.matmul(t, ops.transpose(t, (0, 2, 1))), [], (2, 3, 4)),
    "global_avg_pool": (ops.global_avg_pool, [], (3, 4, 5)),
    "sum_all": (lambda t: ops.sum_all(ops.mul(t, t)), [], (3, 4)),
    "mean_all": (lambda t: ops.mean_all(ops.mul(t, t)), [], (3, 4)),
}
_KINKED = {"absolute", "relu"}


def _grad_case(name):
    op, const_shapes, shape = GRAD_CASES[name]

    def fn(rng):
        with precision(np.float64):
            consts = [Tensor(rng.normal(size=s)) for s in const_shapes]
            return _grad(rng, lambda t: op(t, *consts), shape, positive_away_from_zero=name in _KINKED)
    return fn


def _grad_checks() -> None:
    for name in GRAD_CASES:
        tags = ("gradient", "attention") if name in ("softmax_rows", "matmul") else ("gradient",)
        REGISTRY[f"gradient.{name}"] = Check(f"gradient.{name}", tags, _grad_case(name), GRAD_TOL)


_grad_checks()


@check("gradient.window_attention", "attention", tol=GRAD_TOL)
def _grad_window_attention(rng):
    with precision(np.float64):
        q, k, v = (blocks.init_conv(rng, 2, 2) for _ in range(3))
        return _grad(rng, lambda t: blocks.window_attention(t, q, k, v, (2, 2)), (2, 3, 5))


@check("gradient.bsgm", "blocks", tol=GRAD_TOL)
def _grad_bsgm(rng):
    with precision(np.float64):
        w = blocks.init_bsgm(rng, 3, (2, 2), blocks=4)
        w.norm.gamma.data = 1.0 + 0.3 * rng.normal(size=3)
        w.norm.beta.data = 0.3 * rng.normal(size=3)
        return _grad(rng, lambda t: blocks.bsgm_forward(t, w), (3, 5, 3))


@check("gradient.lrcab", "blocks", tol=GRAD_TOL)
def _grad_lrcab(rng):
    with precision(np.float64):
        w = blocks.init_lrcab(rng, 4)
        return _grad(rng, lambda t: blocks.lrcab_forward(t, w), (4, 4, 4))


@check("gradient.local_stage", "blocks", tol=GRAD_TOL)
def _grad_local(rng):
    with precision(np.float64):
        w = blocks.init_local_stage(rng, 5)
        return _grad(rng, lambda t: blocks.local_stage(t, w), (5, 4, 4))


def tiny_model_input_grad(rng) -> float:
    """Full C=6, I=1 network on an 8x8 input: d readout / d input."""
    with precision(np.float64):
        w = _randomize_ln(rng, _to64(build_model(_tiny_cfg(), seed=int(rng.integers(1 << 30)))))
        return _grad(rng, lambda t: forward(w, t), (3, 8, 8))


def tiny_model_param_grad(rng, per_tensor: int = 2) -> float:
    """Same network, d readout / d parameters on a random subset of entries of every tensor.

    Errors are relative to ``max(|analytic|, |numeric|, 1e-4 * largest gradient)``:
    some entries (key biases, which shift a whole score row) have an exactly zero
    gradient, and a pure elementwise ratio would score finite-difference noise there.
    """
    eps = 1e-5
    with precision(np.float64):
        w = _randomize_ln(rng, _to64(build_model(_tiny_cfg(), seed=int(rng.integers(1 << 30)))))
        x = Tensor(rng.normal(size=(3, 8, 8)))
        read = _probe(rng, (3, 16, 16))
        params = dict(w.named_parameters())
        for p in params.values():
            p.requires_grad = True
        w.zero_grad()
        backward(read(forward(w, x)))
        floor = 1e-4 * max(np.abs(p.grad).max() for p in params.values() if p.grad is not None)
        worst = 0.0
        with no_grad():
            for name, p in params.items():
                ana = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
                for i in picks:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = read(forward(w, x)).item()
                    flat[i] = orig - eps
                    fm = read(forward(w, x)).item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    a = ana.reshape(-1)[i]
                    worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        return worst


check("gradient.tiny_model_input", "network", tol=GRAD_TOL)(tiny_model_input_grad)
check("gradient.tiny_model_params", "network", tol=GRAD_TOL)(tiny_model_param_grad)


# ---------------------------------------------------------------------------
# structural inverses (bit-exact)
# ---------------------------------------------------------------------------

SHAPES_PER_RUN = 25


def _rand_chw(rng, hmax=12):
    return rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(2, hmax)), int(rng.integers(2, hmax))))


@check("structure.grid_roundtrip")
def grid_roundtrip(rng, shapes: int = SHAPES_PER_RUN):
    bad = 0
    for _ in range(shapes):
        wh, ww = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = wh * int(rng.integers(1, 4)), ww * int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), h, w, int(rng.integers(1, 4))))
        y = ops.grid_merge(ops.grid_partition(Tensor(x), (wh, ww)), (wh, ww), (h, w)).data
        bad += not np.array_equal(y, x.astype(y.dtype))
    return float(bad)


@check("structure.pad_crop_roundtrip")
def pad_crop_roundtrip(rng, shapes: int = SHAPES_PER_RUN):
    bad = 0
    for _ in range(shapes):
        x = _rand_chw(rng)
        win = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        xp, rec = ops.pad_reflect(Tensor(x), win)
        ok = xp.shape[1] % win[0] == 0 and xp.shape[2] % win[1] == 0
        bad += not (ok and np.array_equal(ops.crop(xp, rec).data, x.astype(xp.dtype)))
    return float(bad)


@check("structure.cyclic_shift_inverse")
def cyclic_shift_inverse(rng, shapes: int = SHAPES_PER_RUN):
    bad = 0
    for _ in range(shapes):
        x = Tensor(_rand_chw(rng))
        dy, dx = (int(v) for v in rng.integers(-20, 20, size=2))
        bad += not np.array_equal(ops.cyclic_shift(ops.cyclic_shift(x, dy, dx), -dy, -dx).data, x.data)
    return float(bad)


@check("structure.pixel_shuffle_permutation")
def pixel_shuffle_permutation(rng, shapes: int = SHAPES_PER_RUN):
    bad = 0
    for _ in range(shapes):
        a = int(rng.integers(1, 5))
        x = rng.normal(size=(int(rng.integers(1, 4)) * a * a, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        y = ops.pixel_shuffle(Tensor(x), a).data
        same = np.array_equal(np.sort(y, axis=None), np.sort(x.astype(y.dtype), axis=None))
        bad += not (same and y.shape == (x.shape[0] // (a * a), a * x.shape[1], a * x.shape[2]))
    return float(bad)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@check("attention.softmax_normalised", tol=1e-12)
def softmax_normalised(rng):
    with precision(np.float64):
        p = ops.softmax_rows(Tensor(rng.normal(size=(3, 5, 7)) * 10)).data
    return float(np.abs(p.sum(-1) - 1).max() + max(0.0, -p.min()))


def _mssa_case(rng, share: bool, size):
    with precision(np.float64):
        w = blocks.init_mssa(rng, 6, windows=((2, 2), (3, 3), (4, 4)), share_scores=share)
        x = rng.normal(size=(6,) + size)
        return w, x


@check("attention.window_oracle", tol=ORACLE_TOL)
def window_oracle(rng):
    with precision(np.float64):
        q, k, v = (blocks.init_conv(rng, 3, 3) for _ in range(3))
        x = rng.normal(size=(3, 7, 5))
        got = blocks.window_attention(Tensor(x), q, k, v, (3, 2)).data
    want, _ = reference.window_attention(x, q, k, v, (3, 2))
    return _rel(got, want)


@check("attention.w_mssa_oracle", tol=ORACLE_TOL)
def w_mssa_oracle(rng, size=(9, 7)):
    w, x = _mssa_case(rng, False, size)
    with precision(np.float64):
        got = blocks.w_mssa_forward(Tensor(x), w).data
    return _rel(got, reference.mssa(x, w))


@check("attention.sw_mssa_oracle", tol=ORACLE_TOL)
def sw_mssa_oracle(rng, size=(10, 6)):
    w, x = _mssa_case(rng, False, size)
    with precision(np.float64):
        got = blocks.sw_mssa_forward(Tensor(x), w).data
    return _rel(got, reference.mssa(x, w, shifted=True))


@check("attention.sw_mssa_shared_oracle", tol=ORACLE_TOL)
def sw_mssa_shared_oracle(rng, size=(8, 11)):
    w, x = _mssa_case(rng, True, size)
    x2 = rng.normal(size=x.shape)
    with precision(np.float64):
        cache = blocks.AttentionCache()
        blocks.w_mssa_forward(Tensor(x), w, cache)
        got = blocks.sw_mssa_forward(Tensor(x2), w, cache).data
    ref_cache = {}
    reference.mssa(x, w, cache=ref_cache)
    return _rel(got, reference.mssa(x2, w, shifted=True, cache=ref_cache))


@check("attention.global_window_shift_invariance", tol=1e-12)
def global_window_shift_invariance(rng):
    """Window covering the whole image with zero Q/K: every output pixel is the
    global mean of V, with or without a cyclic shift."""
    with precision(np.float64):
        h, wd = 4, 6
        w = blocks.init_mssa(rng, 3, windows=((h, wd),), share_scores=False)
        for c in w.q + w.k:
            c.weight.data[:] = 0
            c.bias.data[:] = 0
        x = Tensor(rng.normal(size=(3, h, wd)))
        plain = blocks.w_mssa_forward(x, w).data
        shifted = blocks.sw_mssa_forward(x, w).data
        v = w.v[0](x).data
        mean = np.broadcast_to(v.mean(axis=(1, 2), keepdims=True), v.shape)
        expect = w.merge(Tensor(np.ascontiguousarray(mean))).data
    return max(_rel(plain, expect), _rel(shifted, expect))


# ---------------------------------------------------------------------------
# blocks and network against the loop reference
# ---------------------------------------------------------------------------

@check("blocks.shift_oracle")
def shift_oracle(rng):
    x = rng.normal(size=(7, 5, 6))
    with precision(np.float64):
        got = blocks.shift_conv(Tensor(x)).data
    return float(np.abs(got - reference.shift(x)).max())


@check("blocks.local_stage_oracle", tol=ORACLE_TOL)
def local_stage_oracle(rng):
    with precision(np.float64):
        w = blocks.init_local_stage(rng, 6)
        x = rng.normal(size=(6, 5, 7))
        got = blocks.local_stage(Tensor(x), w).data
    return _rel(got, reference.local_stage(x, w))


@check("blocks.bsgm_oracle", tol=ORACLE_TOL)
def bsgm_oracle(rng):
    with precision(np.float64):
        w = blocks.init_bsgm(rng, 4, (2, 2), blocks=4)
        w.norm.gamma.data = 1.0 + 0.3 * rng.normal(size=4)
        x = rng.normal(size=(4, 5, 6))
        got = blocks.bsgm_forward(Tensor(x), w).data
    return _rel(got, reference.bsgm(x, w))


@check("blocks.lrcab_oracle", tol=ORACLE_TOL)
def lrcab_oracle(rng):
    worst = 0.0
    for variant in blocks.LRCAB_VARIANTS:
        with precision(np.float64):
            w = blocks.init_lrcab(rng, 6, variant)
            x = rng.normal(size=(6, 5, 4))
            got = blocks.lrcab_forward(Tensor(x), w).data
        worst = max(worst, _rel(got, reference.lrcab(x, w)))
    return worst


def _zero_weights(obj):
    for _, t in blocks.named_tensors(obj):
        t.data = np.zeros_like(t.data)
    return obj


@check("blocks.local_stage_identity")
def local_stage_identity(rng):
    w = _zero_weights(blocks.init_local_stage(rng, 10))
    x = Tensor(rng.normal(size=(10, 6, 5)).astype(np.float32))
    return float(not np.array_equal(blocks.local_stage(x, w).data, x.data))


@check("blocks.lrcab_identity")
def lrcab_identity(rng):
    w = _zero_weights(blocks.init_lrcab(rng, 6))
    x = Tensor(rng.normal(size=(6, 6, 5)).astype(np.float32))
    return float(not np.array_equal(blocks.lrcab_forward(x, w).data, x.data))


@check("blocks.estm_oracle", "attention", tol=ORACLE_TOL)
def estm_oracle(rng):
    with precision(np.float64):
        w = _randomize_ln(rng, _to64(build_model(_tiny_cfg(), seed=int(rng.integers(1 << 30)))))
        x = rng.normal(size=(6, 8, 8))
        got = blocks.estm_forward(Tensor(x), w.estms[0]).data
    return _rel(got, reference.estm(x, w.estms[0]))


@check("network.forward_oracle", tol=ORACLE_TOL)
def network_oracle(rng):
    with precision(np.float64):
        w = _to64(build_model(_tiny_cfg(share_scores=bool(rng.integers(2))), seed=int(rng.integers(1 << 30))))
        x = rng.random((3, 7, 9))
        got = forward(w, Tensor(x)).data
    return _rel(got, reference.network(w, x))


REPORTED_PARAMS = {2: 863_000, 3: 871_000, 4: 881_000}
REPORTED_FLOPS_X4 = 75.1e9


@check("network.param_budget", tol=0.10)
def param_budget(rng):
    return max(abs(count_params(build_model(ModelConfig(scale=a), seed=0)) / n - 1) for a, n in REPORTED_PARAMS.items())


@check("network.flop_budget", tol=0.25)
def flop_budget(rng):
    return abs(estimate_flops(ModelConfig(scale=4)) / REPORTED_FLOPS_X4 - 1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@check("metrics.psnr_closed_form", tol=1e-3)
def psnr_closed_form(rng):
    h = rng.uniform(0, 254, size=(3, 8, 8)).round()
    e1 = abs(psnr(h + 1, h) - 20 * math.log10(255))
    e0 = abs(psnr(np.full((3, 8, 8), 255.0), np.zeros((3, 8, 8))))
    return max(e0, e1)


@check("metrics.ssim_identity")
def ssim_identity(rng):
    x = rng.uniform(0, 255, size=(3, 20, 17))
    return max(abs(ssim(x, x) - 1.0), abs(ssim(x, x, mode="global") - 1.0))


@check("metrics.ssim_symmetric")
def ssim_symmetric(rng):
    x, y = rng.uniform(0, 255, size=(2, 3, 24, 19))
    return abs(ssim(x, y) - ssim(y, x))


# ---------------------------------------------------------------------------
# fault injection and runner
# ---------------------------------------------------------------------------

def _bad_softmax(scores):
    # normalises columns instead of rows
    e = np.exp(scores.data - scores.data.max(axis=-2, keepdims=True))
    return Tensor(e / e.sum(axis=-2, keepdims=True))


def _bad_gelu(x):
    # tanh approximation in place of the exact erf form
    v = x.data
    return Tensor(0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))))


def _bad_pixel_shuffle(x, a):
    c, h, w = x.shape
    d = x.data.reshape(c // (a * a), a, a, h, w).transpose(0, 3, 2, 4, 1).reshape(c // (a * a), h * a, w * a)
    return Tensor(d)


SABOTAGE = {"softmax": ("softmax_rows", _bad_softmax),
            "gelu": ("gelu", _bad_gelu),
            "pixel_shuffle": ("pixel_shuffle", _bad_pixel_shuffle)}


@contextlib.contextmanager
def sabotaged(kind: Optional[str]):
    if kind is None:
        yield
        return
    if kind not in SABOTAGE:
        raise KeyError(f"unknown sabotage {kind!r}; choose from {sorted(SABOTAGE)}")
    attr, bad = SABOTAGE[kind]
    good = getattr(ops, attr)
    setattr(ops, attr, bad)
    try:
        yield
    finally:
        setattr(ops, attr, good)


def select(pattern: Optional[str] = None) -> List[Check]:
    """Checks whose name contains ``pattern`` or that carry it as a tag."""
    return [c for c in REGISTRY.values() if not pattern or pattern in c.tags or pattern in c.name]


def run_check(c: Check, seeds: Iterable[int]) -> CheckResult:
    t0 = time.perf_counter()
    worst, detail = 0.0, ""
    for s in seeds:
        try:
            err = float(c.fn(np.random.default_rng(s)))
        except Exception as exc:  # a crash is a failure of that check, not of the run
            err, detail = math.inf, f"seed {s}: {type(exc).__name__}: {exc}"
        if not err <= worst:
            worst = err
            if not err <= c.tol and not detail:
                detail = f"worst at seed {s}"
        if math.isinf(err) or math.isnan(err):
            break
    return CheckResult(c.name, worst <= c.tol, worst, c.tol, time.perf_counter() - t0, detail)


def run_checks(pattern: Optional[str] = None, seeds: Sequence[int] = (0, 1),
               sabotage: Optional[str] = None) -> List[CheckResult]:
    with sabotaged(sabotage):
        return [run_check(c, seeds) for c in select(pattern)]
