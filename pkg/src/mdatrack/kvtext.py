"""Flat ``name = value`` text files.

The same grammar backs provider-parameter files, run configs and scenario
specs.  Floats are written with ``repr`` so that load/save round-trips are
bit-exact; comments start with '#'.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError


def format_kv(items: dict[str, object]) -> str:
    lines = []
    for name, value in items.items():
        if isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'name = value', got {raw!r}", lineno)
        name, _, value = line.partition("=")
        name = name.strip()
        if not name:
            raise ParseError("empty key", lineno)
        items[name] = value.strip()
    return items


def save_kv(items: dict[str, object], path: str | Path) -> None:
    Path(path).write_text(format_kv(items), encoding="utf-8")


def load_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))
