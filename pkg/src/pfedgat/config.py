"""Flat ``key = value`` experiment configuration files.

Blank lines and ``#`` comments are ignored. Values are Python literals
(``0.01``, ``[64, 32]``, ``true``); a bare word is taken as a string, so
``strategy = fedavg`` works without quotes. Unknown keys are rejected.
"""
from __future__ import annotations

import ast
from dataclasses import fields
from pathlib import Path

from pfedgat.orchestrator import CONFIG_KEYS, ConfigError, ExperimentConfig

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_BOOLS = {"true": True, "false": False, "yes": True, "no": False}


def _coerce(key: str, raw: str, line: int):
    typ = str(_FIELD_TYPES[key])
    text = raw.strip()
    if typ == "bool":
        if text.lower() in _BOOLS:
            return _BOOLS[text.lower()]
        raise ConfigError(key, f"expected true/false, got {text!r}", line)
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        value = text
    try:
        if typ == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if typ == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if typ == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if typ.startswith("tuple"):
            if isinstance(value, int):
                value = (value,)
            if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise TypeError
            return tuple(value)
    except TypeError:
        raise ConfigError(key, f"cannot read {text!r} as {typ}", line) from None
    raise ConfigError(key, f"unsupported field type {typ}", line)


def parse_config(text: str) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("<syntax>", f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown key", lineno)
        if key in values:
            raise ConfigError(key, f"duplicate key (first set on line {lines[key]})", lineno)
        if not value:
            raise ConfigError(key, "missing value", lineno)
        values[key] = _coerce(key, value, lineno)
        lines[key] = lineno
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(exc.key, str(exc).split(": ", 1)[-1], lines.get(exc.key)) from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(str(v) for v in value) + "]"
    if isinstance(value, str):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every field, so loading the text back reproduces ``cfg`` exactly."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.to_dict().items())
