"""Flat ``key = value`` config files and labelled random substreams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np

__all__ = ["substream", "parse_value", "read_config", "write_config", "apply_overrides", "config_hash"]


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label`` under the root ``seed``.

    Changing how much randomness one stage draws never shifts another
    stage's stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict[str, Any]:
    """Read ``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def write_config(path, values: dict[str, Any]) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def apply_overrides(obj, overrides: dict[str, Any], strict: bool = True):
    """Return a copy of dataclass ``obj`` with matching fields replaced."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in overrides.items():
        if key not in names:
            if strict:
                raise KeyError(f"unknown config key {key!r}")
            continue
        current = getattr(obj, key)
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int) and not isinstance(value, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        updates[key] = value
    return dataclasses.replace(obj, **updates)


def config_hash(obj) -> str:
    payload = json.dumps(dataclasses.asdict(obj), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
