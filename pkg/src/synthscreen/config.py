"""Key-value configuration files mapped onto dataclasses.

File format: one ``key = value`` per line, ``#`` starts a comment, list
values are comma separated.  Keys must match dataclass field names.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from pathlib import Path
from typing import Any, Mapping, Optional, TypeVar

T = TypeVar("T")

CONFIG_ENV_VAR = "SYNTHSCREEN_CONFIG"


class ConfigError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() in ("", "none")):
            return None
        return _coerce(value, inner[0], key)
    if not isinstance(value, str):
        return tuple(value) if origin is tuple and isinstance(value, list) else value
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if origin in (tuple, frozenset, list):
            items = [v.strip() for v in value.split(",") if v.strip()]
            elem = args[0] if args else str
            vals = [_coerce(v, elem, key) for v in items]
            return origin(vals) if origin is not list else vals
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    raise ConfigError(f"unsupported field type for {key}: {tp}")


def from_mapping(cls: type[T], values: Mapping[str, Any], source: str = "<config>") -> T:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(cls: type[T], path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> T:
    """Defaults, then the file (explicit path or ``$SYNTHSCREEN_CONFIG``), then overrides."""
    values: dict[str, Any] = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {p}: {e.strerror}") from None
        values.update(parse_key_values(text, str(p)))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(cls, values, str(path or "<defaults>"))


def config_snapshot(cfg: Any) -> dict:
    def norm(v):
        if isinstance(v, (tuple, list)):
            return [norm(x) for x in v]
        if isinstance(v, frozenset):
            return sorted(norm(x) for x in v)
        return v

    return {f.name: norm(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def config_hash(cfg: Any) -> str:
    blob = json.dumps(config_snapshot(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
