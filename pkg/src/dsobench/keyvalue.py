"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored; whitespace around keys and values
is stripped.  Values stay strings; callers convert with the helpers below.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_keyvalue(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_keyvalue(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_keyvalue(path.read_text(), source=str(path))


def format_keyvalue(values: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def require(values: dict[str, str], keys: list[str], source: str = "config") -> None:
    missing = [k for k in keys if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing keys {', '.join(missing)}")


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def as_floats(value: str) -> list[float]:
    return [float(x) for x in value.replace(",", " ").split()]
