"""Flat ``key = value`` text files.

Used for dataset manifests, candidate-store manifests, and resolved run
configs. Values are written with repr-faithful formatting so that a
write -> read round trip recovers ints, floats, bools, strings, and flat
tuples exactly.
"""

from __future__ import annotations

import os
from typing import Any, Mapping


def format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "(" + ", ".join(format_value(v) for v in value) + ")"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str) -> Any:
    text = text.strip()
    if text.startswith("(") and text.endswith(")"):
        inner = text[1:-1].strip()
        if not inner:
            return ()
        return tuple(parse_value(p) for p in inner.split(","))
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def dumps(entries: Mapping[str, Any]) -> str:
    lines = [f"{key} = {format_value(value)}" for key, value in entries.items()]
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, Any]:
    entries: dict[str, Any] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"malformed key/value line: {raw!r}")
        entries[key.strip()] = parse_value(value)
    return entries


def write_kv(path: str | os.PathLike, entries: Mapping[str, Any]) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(entries))
    os.replace(tmp, path)


def read_kv(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
