"""8-bit RGB image I/O: PNG through Pillow, binary PPM (P6) without dependencies.

Arrays are float ``[3, H, W]`` in ``[0, 1]``.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .serialize import atomic_write_bytes

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] -> ``[H, W, 3]`` bytes (clipped, rounded)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _decode_ppm(data: bytes, source: str) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{source}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ImageError(f"{source}: only binary P6 PPM is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageError(f"{source}: bad PPM header") from exc
    if maxval != 255:
        raise ImageError(f"{source}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ImageError(f"{source}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if path.suffix.lower() == ".ppm" or data[:2] == b"P6":
        rgb = _decode_ppm(data, str(path))
    else:
        from PIL import Image

        try:
            with Image.open(io.BytesIO(data)) as im:
                rgb = np.asarray(im.convert("RGB"))
        except Exception as exc:  # Pillow raises a zoo of types for bad files
            raise ImageError(f"cannot decode {path}: {exc}") from exc
    return rgb.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    rgb = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        data = encode_ppm(rgb)
    else:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(rgb, "RGB").save(buf, format="PNG")
        data = buf.getvalue()
    atomic_write_bytes(path, data)


def list_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ImageError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
