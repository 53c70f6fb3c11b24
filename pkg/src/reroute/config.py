"""Flat ``key = value`` config files (``#`` starts a comment)."""

from __future__ import annotations

import dataclasses
import types
import typing


class ConfigFileError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigFileError(f"line {n}: empty key")
        if key in out:
            raise ConfigFileError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def dump_kv(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(value: str, tp):
    """Convert a config string to the annotated field type."""
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("none", "null", ""):
            return None
        return coerce(value, args[0])
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"not a boolean: {value!r}")
    if tp in (int, float, str):
        try:
            return tp(value)
        except ValueError:
            raise ConfigFileError(f"cannot parse {value!r} as {tp.__name__}") from None
    raise ConfigFileError(f"unsupported field type {tp!r}")


def build(cls, values: dict[str, str], prefix: str = ""):
    """Instantiate dataclass ``cls`` from the ``prefix``-ed keys of ``values``."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = coerce(values[key], hints[f.name])
    return cls(**kwargs)
