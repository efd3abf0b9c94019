"""L1 training with Adam, step-halving learning rate, bicubic LR/HR patch pairs."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .imageio import list_images, read_image
from .network import ConfigError, EstnWeights, forward
from .resample import bicubic_resize
from .serialize import atomic_write_bytes, save_checkpoint
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    patch_size: int = 64
    lr: float = 2e-4
    milestones: Tuple[int, ...] = (250, 400, 425, 450, 475)
    schedule_unit: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8
    iterations: int = 500
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch_size and patch_size must be >= 1")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.lr <= 0 or self.schedule_unit < 1 or self.iterations < 0 or self.checkpoint_every < 0:
            raise ConfigError("lr > 0, schedule_unit >= 1, iterations >= 0, checkpoint_every >= 0 required")
        return self


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def train_config_from_dict(values: Mapping[str, object], base: TrainConfig = TrainConfig()) -> TrainConfig:
    kwargs = {}
    for key, raw in values.items():
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown training config key {key!r}")
        try:
            if key == "milestones":
                v = raw if not isinstance(raw, str) else tuple(int(s) for s in raw.split(",") if s.strip())
            elif key in ("lr", "beta1", "beta2", "eps", "weight_decay"):
                v = float(raw)
            else:
                v = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        kwargs[key] = v
    cfg = TrainConfig(**{**{f.name: getattr(base, f.name) for f in fields(TrainConfig)}, **kwargs})
    return cfg.validate()


# ---------------------------------------------------------------------------
# loss, optimiser, schedule
# ---------------------------------------------------------------------------

def l1_loss(sr_batch: Sequence[Tensor], hr_batch: Sequence) -> Tensor:
    """Batch mean of per-image L1 norms."""
    if len(sr_batch) != len(hr_batch) or not sr_batch:
        raise ValueError("l1_loss needs equally sized, non-empty batches")
    total = None
    for sr, hr in zip(sr_batch, hr_batch):
        hr_data = hr.data if isinstance(hr, Tensor) else np.asarray(hr)
        if sr.shape != hr_data.shape:
            raise ValueError(f"shape mismatch: {sr.shape} vs {hr_data.shape}")
        term = ops.sum_all(ops.absolute(ops.sub(sr, Tensor(hr_data, dtype=sr.dtype))))
        total = term if total is None else total + term
    return total * (1.0 / len(sr_batch))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()}, 0)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update - lr * weight_decay * p.data).astype(p.dtype, copy=False)
    return state


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    unit = iteration / cfg.schedule_unit
    halvings = sum(1 for m in cfg.milestones if m <= unit)
    return cfg.lr * 0.5 ** halvings


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def mod_crop(hr: np.ndarray, a: int) -> np.ndarray:
    _, h, w = hr.shape
    return hr[:, : h - h % a, : w - w % a]


def degrade(hr: np.ndarray, a: int) -> np.ndarray:
    """Bicubic LR counterpart of a mod-cropped HR image."""
    hr = mod_crop(hr, a)
    return bicubic_resize(hr, size=(hr.shape[1] // a, hr.shape[2] // a))


def sample_patch_pair(hr: np.ndarray, a: int, patch: int, rng: np.random.Generator,
                      lr: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    hr = mod_crop(np.asarray(hr), a)
    if lr is None:
        lr = degrade(hr, a)
    _, lh, lw = lr.shape
    if lh < patch or lw < patch:
        raise DataError(f"LR image {lh}x{lw} smaller than patch {patch}")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    return (lr[:, y:y + patch, x:x + patch],
            hr[:, a * y:a * (y + patch), a * x:a * (x + patch)])


@dataclass
class TrainingPair:
    hr: np.ndarray
    lr: np.ndarray


def load_dataset(data, a: int) -> List[TrainingPair]:
    """HR images from a directory (or in-memory arrays) with their LR counterparts.

    Already-built :class:`TrainingPair` lists pass through unchanged.
    """
    if isinstance(data, (str, Path)):
        try:
            paths = list_images(data)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        images = [read_image(p) for p in paths]
    else:
        data = list(data)
        if data and all(isinstance(d, TrainingPair) for d in data):
            return data
        images = [np.asarray(im, dtype=np.float32) for im in data]
    if not images:
        raise DataError(f"no training images in {data}")
    pairs = []
    for im in images:
        hr = mod_crop(im, a)
        pairs.append(TrainingPair(hr, degrade(hr, a).astype(np.float32)))
    return pairs


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: List[Tuple[int, float, float]]
    checkpoints: List[Path]
    state: AdamState

    def loss_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in self.losses:
            wr.writerow([it, repr(lr), repr(loss)])
        return buf.getvalue()


Callback = Callable[[int, float, float], None]


def train_loop(w: EstnWeights, data, cfg: TrainConfig, callbacks: Iterable[Callback] = (),
               out_dir=None, fixed_pairs: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None) -> TrainResult:
    """Optimise ``w`` in place.

    Each iteration samples ``batch_size`` patch pairs (or cycles through
    ``fixed_pairs``), accumulates per-image gradients of the batch-mean L1 loss,
    and takes one Adam step at ``lr_at(iteration)``.  Checkpoints go to
    ``out_dir`` at iteration 0, every ``checkpoint_every`` iterations, and at the end.
    """
    cfg.validate()
    callbacks = list(callbacks)
    a = w.cfg.scale
    rng = np.random.default_rng(cfg.seed)
    dataset = None if fixed_pairs is not None else load_dataset(data, a)
    params = dict(w.named_parameters())
    state = AdamState.for_params(params)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult([], [], state)

    def checkpoint(it: int) -> None:
        if out is None:
            return
        path = out / f"ckpt_{it:06d}.estn"
        save_checkpoint(path, w, state)
        result.checkpoints.append(path)
        atomic_write_bytes(out / "loss.csv", result.loss_csv().encode())

    checkpoint(0)
    for it in range(cfg.iterations):
        lr = lr_at(it, cfg)
        if fixed_pairs is not None:
            batch = [fixed_pairs[(it * cfg.batch_size + j) % len(fixed_pairs)] for j in range(cfg.batch_size)]
        else:
            picks = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = [sample_patch_pair(dataset[i].hr, a, cfg.patch_size, rng, dataset[i].lr) for i in picks]
        w.zero_grad()
        total = 0.0
        try:
            for lr_patch, hr_patch in batch:
                sr = forward(w, Tensor(lr_patch))
                loss = l1_loss([sr], [hr_patch]) * (1.0 / len(batch))
                backward(loss)
                total += loss.item()
        except NonFiniteError as exc:
            raise NumericalAbort(f"iteration {it} (lr={lr:g}): {exc}") from exc
        if not np.isfinite(total):
            raise NumericalAbort(f"iteration {it} (lr={lr:g}): loss is {total}")
        result.losses.append((it, lr, total))
        for cb in callbacks:
            cb(it, lr, total)
        adam_step(params, {n: p.grad for n, p in params.items()}, state, lr,
                  cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        done = it + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.iterations:
            checkpoint(done)
    if cfg.iterations > 0:
        checkpoint(cfg.iterations)
    elif out is not None:
        atomic_write_bytes(out / "loss.csv", result.loss_csv().encode())
    return result
