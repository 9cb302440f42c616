"""Operator settings: built-in defaults, then a key=value file, then flags."""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .thin_pool import CHUNK_SIZE_DEFAULT
from .crypto import DEFAULT_KDF_ITERATIONS
from .mount_service import DEFAULT_TIMEOUT
from .volumes import NAME_TRIM_DEFAULT

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kb": 1000, "kib": 1 << 10, "m": 1 << 20, "mb": 1000 ** 2,
          "mib": 1 << 20, "g": 1 << 30, "gb": 1000 ** 3, "gib": 1 << 30}
_SIZE = re.compile(r"^\s*(\d+)\s*([a-zA-Z]*)\s*$")


def parse_size(text) -> int:
    """``"64MiB"`` -> 67108864. Bare numbers are bytes."""
    if isinstance(text, int):
        return text
    m = _SIZE.match(str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise ValueError(f"bad size {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


@dataclass(frozen=True)
class Config:
    image_path: str | None = None
    chunk_size: int = CHUNK_SIZE_DEFAULT
    name_trim_b: int = NAME_TRIM_DEFAULT
    mount_timeout: float = DEFAULT_TIMEOUT
    kdf_iterations: int = DEFAULT_KDF_ITERATIONS

    def merged(self, **overrides) -> "Config":
        """Copy with every non-``None`` override applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_PARSERS = {
    "image_path": str,
    "chunk_size": parse_size,
    "name_trim_b": int,
    "mount_timeout": float,
    "kdf_iterations": int,
}


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    values = {}
    known = {f.name for f in fields(Config)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"config line {lineno}: {e}") from None
    return replace(base, **values)


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
