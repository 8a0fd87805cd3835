"""JSON configuration: dataclass construction with field-path errors, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from pathlib import Path

from .errors import ConfigError, SoftBeamError


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints.get(f.name) for f in dataclasses.fields(cls)}


def build(cls, data, path: str = "config", nested: dict | None = None):
    """Instantiate dataclass ``cls`` from a JSON object.

    ``nested`` maps field names to dataclasses for sub-objects.  Unknown keys,
    wrong types and failed validation all raise :class:`ConfigError` naming
    the offending field path.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    types = _field_types(cls)
    nested = nested or {}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}"
        if key not in types:
            raise ConfigError(f"{where}: unknown field (expected one of {sorted(types)})")
        if key in nested and value is not None:
            value = build(nested[key], value, where)
        else:
            _check_type(value, types[key], where)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError, SoftBeamError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_type(value, hint, where):
    """Light type check for JSON scalars and lists; anything exotic passes."""
    if hint is None:
        return
    union = typing.get_origin(hint) in (typing.Union, types.UnionType)
    options = typing.get_args(hint) if union else (hint,)
    for opt in options:
        if opt is type(None) and value is None:
            return
        if opt is bool and isinstance(value, bool):
            return
        if opt is int and isinstance(value, int) and not isinstance(value, bool):
            return
        if opt is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return
        if opt is str and isinstance(value, str):
            return
        origin = typing.get_origin(opt) or opt
        if origin in (list, tuple) and isinstance(value, list):
            return
        if origin is dict and isinstance(value, dict):
            return
        if opt not in (type(None), bool, int, float, str) and origin not in (list, tuple, dict):
            return
    raise ConfigError(f"{where}: expected {hint}, got {json.dumps(value)}")


def load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_default)


def _default(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def config_hash(data) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]
