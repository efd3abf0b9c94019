"""Flat ``key = value`` config text and conversion to typed configs."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple

from .network import ConfigError, ModelConfig

MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv_file(path) -> Dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_kv_text(text, str(p))


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_window(v: str) -> Tuple[int, int]:
    parts = v.lower().replace("×", "x").split("x")
    if len(parts) == 1:
        n = int(parts[0])
        return (n, n)
    if len(parts) != 2:
        raise ValueError(f"not a window: {v!r}")
    return (int(parts[0]), int(parts[1]))


def _parse_windows(v: str) -> Tuple[Tuple[int, int], ...]:
    return tuple(_parse_window(p) for p in v.split(",") if p.strip())


def _fmt_window(w) -> str:
    return f"{w[0]}x{w[1]}"


_MODEL_PARSERS = {
    "channels": int, "blocks": int, "scale": int, "bsgm_tile": int, "train_patch": int,
    "attention_ratio": int, "mssa_windows": _parse_windows, "bsgm_window": _parse_window,
    "bsgm_enabled": _parse_bool, "share_scores": _parse_bool, "lrcab_variant": str,
}


def model_config_from_dict(values: Mapping[str, Any], base: ModelConfig = ModelConfig()) -> ModelConfig:
    kwargs = {}
    for key, raw in values.items():
        if key not in _MODEL_PARSERS:
            raise ConfigError(f"unknown model config key {key!r}")
        try:
            kwargs[key] = _MODEL_PARSERS[key](raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    cfg = ModelConfig(**{**{f.name: getattr(base, f.name) for f in fields(ModelConfig)}, **kwargs})
    return cfg.validate()


def model_config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name == "mssa_windows":
            v = ",".join(_fmt_window(w) for w in v)
        elif f.name == "bsgm_window":
            v = _fmt_window(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def split_known(values: Mapping[str, str], groups: Iterable[Iterable[str]]) -> list:
    """Partition ``values`` among key groups; any key in no group is a config error."""
    groups = [set(g) for g in groups]
    parts = [{} for _ in groups]
    for key, v in values.items():
        for g, part in zip(groups, parts):
            if key in g:
                part[key] = v
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return parts
