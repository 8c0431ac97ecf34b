"""Flat ``key = value`` run configuration. Unknown keys are rejected."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage_checkpoint: str | None = None
    experience_checkpoint: str | None = None
    policy: str | None = None
    rain_file: str | None = None
    stop_k: int = 2
    rearm: bool = False
    seed: int = 0
    stim_seed: int = 0
    port: int = 5750
    host: str = "127.0.0.1"
    gain_dbfs: float = -40.0
    target_db_spl: float | None = None
    calibration_db_spl: float | None = None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, text):
    kind = _TYPES[key]
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    """File values, then non-None ``overrides`` (command-line flags win)."""
    values = parse_config(Path(path).read_text(encoding="utf-8")) if path else {}
    for key, value in overrides.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown setting {key!r}")
        if value is not None:
            values[key] = value
    return RunConfig(**values)
