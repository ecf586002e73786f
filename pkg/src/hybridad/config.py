"""Flat ``key = value`` configuration documents.

Every dataclass config in the package round-trips through this format.  Tuple
fields are written comma-separated, booleans as ``true``/``false``, and ``#``
starts a comment.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_kv(items: Mapping[str, Any]) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in items.items())


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if raw == "" and len(inner) < len(args):
            return None
        return _coerce(raw, inner[0], key)
    try:
        if origin is tuple:
            if raw == "":
                return ()
            elem = args[0] if args else str
            return tuple(_coerce(part.strip(), elem, key) for part in raw.split(","))
        if hint is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {hint}") from None
    return raw


def to_kv(obj: Any, prefix: str = "") -> dict[str, Any]:
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def from_kv(cls: type, values: Mapping[str, str], prefix: str = "", strict: bool = True):
    """Build dataclass ``cls`` from string values, keeping defaults for absent keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[name] = _coerce(raw, hints[name], key)
    return cls(**kwargs)
