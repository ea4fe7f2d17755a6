"""``key = value`` daemon configuration."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

ENV_VAR = "TRILOGY_CONFIG"
DEFAULT_MEDIATOR = "127.0.0.1:7700"
WEEK = 7 * 24 * 3600.0

_LIST_KEYS = {"mediators", "topics", "keywords"}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhdw]?)\s*$")
_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}


class ConfigError(ValueError):
    pass


def parse_duration(text: str) -> float:
    m = _DURATION_RE.match(str(text))
    if not m:
        raise ConfigError(f"bad duration {text!r} (examples: 90, 30m, 12h, 7d)")
    return float(m.group(1)) * _UNITS[m.group(2)]


def split_list(text: str) -> list[str]:
    return [item.strip() for item in str(text).split(",") if item.strip()]


@dataclass
class Config:
    data_dir: str = "."
    listen: Optional[str] = None
    mediators: list = field(default_factory=lambda: [DEFAULT_MEDIATOR])
    resource_name: str = ""
    topics: list = field(default_factory=list)
    keywords: list = field(default_factory=list)
    max_instances: int = 1
    profile_blend: float = 0.8
    notify_threshold: float = 0.5
    refresh_interval: float = WEEK
    ontology: Optional[str] = None
    source: Optional[str] = None  # file the values came from, if any

    def check(self) -> "Config":
        if not isinstance(self.max_instances, int) or self.max_instances < 1:
            raise ConfigError("max_instances must be a positive integer")
        if not 0.0 < self.profile_blend < 1.0:
            raise ConfigError("profile_blend must be in (0, 1)")
        if not 0.0 <= self.notify_threshold <= 1.0:
            raise ConfigError("notify_threshold must be in [0, 1]")
        if self.refresh_interval < 0:
            raise ConfigError("refresh_interval must be non-negative")
        return self


KEYS = {f.name for f in fields(Config)} - {"source"}


def coerce(key: str, value):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _LIST_KEYS:
        return split_list(value) if isinstance(value, str) else list(value)
    try:
        if key == "max_instances":
            return int(value)
        if key in ("profile_blend", "notify_threshold"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: bad number {value!r}") from None
    if key == "refresh_interval":
        return parse_duration(value)
    return str(value)


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        values[key] = coerce(key, value.strip())
    return values


def render_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                fallback: Optional[Path] = None) -> Config:
    """Resolve the config file (flag, then $TRILOGY_CONFIG, then *fallback*) and apply *overrides*."""
    path = path or os.environ.get(ENV_VAR)
    values: dict = {}
    source = None
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        values = parse_config(p.read_text(encoding="utf-8"))
        source = str(p)
    elif fallback is not None and fallback.is_file():
        values = parse_config(fallback.read_text(encoding="utf-8"))
        source = str(fallback)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    cfg = Config(**values)
    cfg.source = source
    # paths written in a config file are relative to that file
    for key in ("data_dir", "ontology"):
        value = getattr(cfg, key)
        if source and value and key in values and (overrides or {}).get(key) is None \
                and not Path(value).is_absolute():
            setattr(cfg, key, str(Path(source).parent / value))
    return cfg.check()
