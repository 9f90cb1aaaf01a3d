"""Flat ``key = value`` configuration files."""
from __future__ import annotations

import hashlib
import os


class ConfigError(ValueError):
    def __init__(self, message, key=None, path=None):
        super().__init__(message)
        self.key = key
        self.path = path


def parse_config(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}", path=source)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key", path=source)
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}", path=path)
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), path)


def dump_config(values: dict) -> str:
    """Canonical form: sorted keys, one ``key = value`` per line."""
    return "".join(f"{k} = {_fmt(values[k])}\n" for k in sorted(values))


def config_digest(values: dict) -> bytes:
    return hashlib.sha256(dump_config(values).encode("utf-8")).digest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def as_bool(value: str, key: str = "") -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}", key=key)
