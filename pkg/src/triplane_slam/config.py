"""Flat ``key = value`` run configuration layered over :class:`SlamConfig` defaults."""

from __future__ import annotations

import dataclasses
import logging
import os
from pathlib import Path
from typing import Any

from .slam import SlamConfig

RUN_KEYS = {"data": "", "out": "", "precision": "double"}
PRECISIONS = ("double",)


class ConfigError(ValueError):
    pass


def _field_types() -> dict[str, type]:
    defaults = SlamConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(SlamConfig)}
    types.update({k: str for k in RUN_KEYS})
    return types


def coerce(key: str, raw: Any) -> Any:
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


@dataclasses.dataclass
class RunConfig:
    slam: SlamConfig = dataclasses.field(default_factory=SlamConfig)
    data: str = ""
    out: str = ""
    precision: str = "double"

    @classmethod
    def build(cls, path=None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        values: dict[str, Any] = {}
        if path is not None:
            values.update(parse_config_text(Path(path).read_text()))
        for k, v in (overrides or {}).items():
            if v is not None:
                values[k] = coerce(k, v)
        run = {k: values.pop(k) for k in list(values) if k in RUN_KEYS}
        cfg = cls(SlamConfig(**values), **run)
        if cfg.precision not in PRECISIONS:
            raise ConfigError(f"precision {cfg.precision!r} not supported (available: {', '.join(PRECISIONS)})")
        return cfg

    def items(self) -> list[tuple[str, Any]]:
        pairs = [(k, getattr(self, k)) for k in RUN_KEYS]
        pairs += [(f.name, getattr(self.slam, f.name)) for f in dataclasses.fields(SlamConfig)]
        return pairs

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def setup_logging() -> None:
    level = os.environ.get("SLAM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
