"""Shared plumbing: content hashes, flat config files, determinism setup."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path

import numpy as np
import torch


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries where it happened."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def config_lines(cfg) -> list[str]:
    """Canonical key=value serialization of a flat config dataclass, sorted by key."""
    if not dataclasses.is_dataclass(cfg):
        raise TypeError(f"expected a dataclass, got {type(cfg).__name__}")
    items = dataclasses.asdict(cfg)
    return [f"{key}={_format_value(items[key])}" for key in sorted(items)]


def config_hash(cfg) -> str:
    return sha256_bytes("\n".join(config_lines(cfg)).encode())


def save_config(cfg, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(config_lines(cfg)) + "\n")
    return path


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value file; blank lines and #-comments ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"cannot parse boolean from {text!r}")


def _coerce(value: str, target_type) -> object:
    origin = typing.get_origin(target_type)
    if origin is tuple:
        args = typing.get_args(target_type)
        parts = [p.strip() for p in value.split(",")]
        if len(args) == 2 and Ellipsis not in args:
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values, got {value!r}")
            return tuple(_coerce(p, a) for p, a in zip(parts, args))
        elem = args[0] if args else str
        return tuple(_coerce(p, elem) for p in parts)
    if target_type is bool:
        return parse_bool(value)
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return value
    raise TypeError(f"unsupported config field type {target_type!r}")


def build_config(cls, values: dict[str, str]):
    """Construct a flat config dataclass from string key-value pairs.

    Unknown keys raise; missing keys keep their defaults.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except (ValueError, TypeError) as exc:
            raise ValueError(f"config key {key!r}: {exc}") from exc
    return cls(**kwargs)


def setup_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed torch and switch on deterministic kernels (CPU-safe)."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def new_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent deterministic stream keyed by (seed, *tags)."""
    return np.random.default_rng([seed, *tags])
