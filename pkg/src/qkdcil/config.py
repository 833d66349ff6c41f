"""Flat key = value configuration shared by every CLI subcommand.

One namespace covers both the synthetic stream shape and the training
hyperparameters; `seed` appears once and seeds both, so paired runs
(ablation rows, gate comparisons) reuse the same data and the same
initialization.  Precedence: built-in default < config file < CLI flag.
"""

from __future__ import annotations

from dataclasses import fields

from .datagen import StreamSpec
from .errors import ConfigError
from .trainer import TrainConfig

_STREAM_TYPES = {f.name: type(f.default) for f in fields(StreamSpec)}
_TRAIN_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}

# Stream keys first so reports echo data shape before hyperparameters.
CONFIG_TYPES: dict[str, type] = {**_STREAM_TYPES, **_TRAIN_TYPES}
CONFIG_KEYS = tuple(CONFIG_TYPES)
STREAM_KEYS = tuple(_STREAM_TYPES)


def _unknown_key_error(key: str) -> ConfigError:
    valid = ", ".join(sorted(CONFIG_TYPES))
    return ConfigError(f"unknown config key {key!r}; valid keys: {valid}")


def coerce_value(key: str, value):
    """Convert a raw (possibly string) value to the key's declared type."""
    if key not in CONFIG_TYPES:
        raise _unknown_key_error(key)
    want = CONFIG_TYPES[key]
    if isinstance(value, str):
        text = value.strip()
        if want is str:
            return text
        try:
            return want(text)
        except ValueError:
            raise ConfigError(
                f"config key {key!r} expects {want.__name__}, got {text!r}"
            ) from None
    if isinstance(value, bool):
        raise ConfigError(f"config key {key!r} expects {want.__name__}, got a bool")
    if want is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, want):
        raise ConfigError(
            f"config key {key!r} expects {want.__name__}, got {type(value).__name__}"
        )
    return value


def default_config() -> dict:
    out = {}
    for f in fields(StreamSpec):
        out[f.name] = f.default
    for f in fields(TrainConfig):
        out[f.name] = f.default
    return out


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment, later keys win."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = coerce_value(key.strip(), value)
    return out


def parse_inline_overrides(text: str, allowed: tuple[str, ...] | None = None) -> dict:
    """Parse 'key=value,key=value' (the --stream flag format)."""
    out: dict = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ConfigError(f"expected key=value, got {chunk!r}")
        key, _, value = chunk.partition("=")
        key = key.strip()
        if allowed is not None and key not in allowed:
            raise ConfigError(
                f"key {key!r} not allowed here; expected one of: {', '.join(allowed)}"
            )
        out[key] = coerce_value(key, value)
    return out


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Full resolved configuration with every key present.

    The returned dict is what reports embed: no hidden defaults.
    """
    resolved = default_config()
    if path is not None:
        resolved.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        resolved[key] = coerce_value(key, value)
    return resolved


def train_config_from(resolved: dict) -> TrainConfig:
    return TrainConfig(**{k: resolved[k] for k in _TRAIN_TYPES})


def stream_spec_from(resolved: dict) -> StreamSpec:
    return StreamSpec(**{k: resolved[k] for k in _STREAM_TYPES})
