"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values are coerced to the
annotated type of the matching dataclass field; lists are comma separated and
mappings are ``k:v`` pairs separated by commas.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ",".join(f"{k}:{format_value(v)}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def dump_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def _coerce(text: str, tp) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if text == "" and type(None) in args:
            return None
        return _coerce(text, inner[0])
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if origin in (list, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        return [_coerce(s, args[0] if args else str) for s in items]
    if origin is dict:
        kt, vt = args if args else (str, str)
        out = {}
        for item in (s.strip() for s in text.split(",") if s.strip()):
            if ":" not in item:
                raise ConfigError(f"mapping item needs k:v, got {item!r}")
            k, v = item.split(":", 1)
            out[_coerce(k.strip(), kt)] = _coerce(v.strip(), vt)
        return out
    raise ConfigError(f"unsupported field type {tp!r}")


def apply_config(obj, values: dict[str, str], strict: bool = True):
    """Return a copy of dataclass ``obj`` with ``values`` coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, text in values.items():
        if key not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r} for {type(obj).__name__}")
            continue
        try:
            updates[key] = _coerce(text, hints[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return dataclasses.replace(obj, **updates)


def config_dict(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
