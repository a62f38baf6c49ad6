"""Config-file loading (JSON or TOML) with DISTILLSEG_ environment overrides."""

from __future__ import annotations

import json
import os
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from .errors import ConfigurationError

ENV_PREFIX = "DISTILLSEG_"


def load_config_file(path) -> dict:
    """Parse a JSON or TOML document into a flat dict (by file suffix;
    unknown suffixes try JSON first, then TOML)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            return json.loads(text)
        if suffix == ".toml":
            return tomllib.loads(text)
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, (list, tuple)):
        return type(like)(json.loads(raw))
    return raw


def apply_env_overrides(config: dict, environ=None) -> dict:
    """Overlay DISTILLSEG_<KEY> environment variables onto a config dict,
    coercing values to the type already present under the same key."""
    environ = os.environ if environ is None else environ
    out = dict(config)
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        try:
            out[name] = _coerce(raw, out.get(name))
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"bad env override {key}={raw!r}: {exc}") from exc
    return out
