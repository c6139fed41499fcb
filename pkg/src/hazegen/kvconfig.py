"""Flat ``key = value`` config files (a TOML subset).

Values use JSON literal syntax, which coincides with TOML for numbers,
double-quoted strings, booleans and flat arrays. Optional ``[section]``
headers group keys one level deep. ``#`` starts a comment outside strings.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from hazegen.errors import ConfigError


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def loads(text: str, source: str = "<config>") -> dict[str, Any]:
    root: dict[str, Any] = {}
    current = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name or name in root:
                raise ConfigError(f"{source}:{lineno}: bad or duplicate section [{name}]")
            current = root[name] = {}
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in current:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            current[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc.msg}") from None
    return root


def dumps(data: dict[str, Any]) -> str:
    flat = [(k, v) for k, v in data.items() if not isinstance(v, dict)]
    sections = [(k, v) for k, v in data.items() if isinstance(v, dict)]
    lines = [f"{k} = {json.dumps(_plain(v))}" for k, v in flat]
    for name, body in sections:
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {json.dumps(_plain(v))}" for k, v in body.items())
    return "\n".join(lines) + "\n"


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def load(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, str(path))


def dump(data: dict[str, Any], path) -> None:
    Path(path).write_text(dumps(data))
