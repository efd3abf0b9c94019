"""Weights and checkpoint files.

Layout (little-endian)::

    "ESTN" u32 version=1 u32 count
    count x { u16 name_len, name, u8 rank, rank x u32 dim, f32 payload (row-major) }

Checkpoints append an optimizer section with the same tensor framing::

    "ADAM" u32 version=1 u64 step u32 count  tensors named m.<param> / v.<param>

The model config lives next to the weights in ``<path>.cfg`` as ``key = value`` lines.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .config import model_config_to_text, model_config_from_dict, read_kv_file
from .network import ConfigError, EstnWeights, ModelConfig, build_model

MAGIC = b"ESTN"
ADAM_MAGIC = b"ADAM"
VERSION = 1


class CorruptWeightsError(ValueError):
    pass


class WeightShapeError(ValueError):
    def __init__(self, name: str, expected, got):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, file has {tuple(got)}")
        self.name = name


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    return Path(str(path) + ".cfg")


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptWeightsError(f"{self.source}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def decode_tensors(r: _Reader) -> Dict[str, np.ndarray]:
    (count,) = r.unpack("<I", "tensor count")
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor #{i}")
        try:
            name = r.take(n, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptWeightsError(f"{r.source}: tensor #{i} has a non-UTF-8 name") from exc
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name!r}")
        if name in out:
            raise CorruptWeightsError(f"{r.source}: duplicate tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if not np.all(np.isfinite(arr)):
            raise CorruptWeightsError(f"{r.source}: tensor {name!r} holds non-finite values")
        out[name] = arr
    return out


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4, "magic")
    if got != magic:
        raise CorruptWeightsError(f"{r.source}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CorruptWeightsError(f"{r.source}: unsupported version {version}")


def weights_bytes(w: EstnWeights) -> bytes:
    return MAGIC + struct.pack("<I", VERSION) + encode_tensors(w.state_dict())


def save_weights(w: EstnWeights, path) -> None:
    atomic_write_bytes(sidecar_path(path), model_config_to_text(w.cfg).encode())
    atomic_write_bytes(path, weights_bytes(w))


def read_config(path) -> ModelConfig:
    side = sidecar_path(path)
    if not side.exists():
        raise ConfigError(f"missing config sidecar {side}")
    return model_config_from_dict(read_kv_file(side))


def read_sections(path) -> Tuple[Dict[str, np.ndarray], Optional[Tuple[int, Dict[str, np.ndarray]]]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptWeightsError(f"cannot read {path}: {exc}") from exc
    r = _Reader(data, str(path))
    _header(r, MAGIC)
    weights = decode_tensors(r)
    adam = None
    if r.remaining:
        _header(r, ADAM_MAGIC)
        (step,) = r.unpack("<Q", "optimizer step")
        adam = (step, decode_tensors(r))
        if r.remaining:
            raise CorruptWeightsError(f"{path}: {r.remaining} trailing bytes")
    return weights, adam


def assign_state(w: EstnWeights, tensors: Dict[str, np.ndarray]) -> EstnWeights:
    expected = dict(w.named_parameters())
    for name, t in expected.items():
        if name not in tensors:
            raise CorruptWeightsError(f"tensor {name!r} missing from file")
        if tensors[name].shape != t.shape:
            raise WeightShapeError(name, t.shape, tensors[name].shape)
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CorruptWeightsError(f"unexpected tensor {extra[0]!r} in file")
    for name, t in expected.items():
        t.data = np.ascontiguousarray(tensors[name], dtype=t.dtype)
        t.grad = None
    return w


def load_weights(path, cfg: Optional[ModelConfig] = None) -> EstnWeights:
    """Load weights; the config comes from the sidecar unless given explicitly."""
    tensors, _ = read_sections(path)
    cfg = cfg if cfg is not None else read_config(path)
    return assign_state(build_model(cfg, seed=0), tensors)


def save_checkpoint(path, w: EstnWeights, adam_state) -> None:
    moments = {}
    for name, _ in w.named_parameters():
        moments[f"m.{name}"] = adam_state.m[name]
        moments[f"v.{name}"] = adam_state.v[name]
    tail = ADAM_MAGIC + struct.pack("<IQ", VERSION, adam_state.step) + encode_tensors(moments)
    atomic_write_bytes(sidecar_path(path), model_config_to_text(w.cfg).encode())
    atomic_write_bytes(path, weights_bytes(w) + tail)
