"""Deterministic JSON emission: insertion-ordered keys, 17-digit floats.

The stdlib encoder renders floats with repr(), whose digit count varies
per value; emitting every float with 17 significant digits keeps diffs
stable and round-trips float64 exactly.
"""

from __future__ import annotations

import json
import math
from typing import Any


def _render(obj: Any, parts: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1))
    closing_pad = " " * (indent * level)
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, int):
        parts.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite float {obj!r}")
        parts.append(format(obj, ".17g"))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"object keys must be strings, got {type(key).__name__}")
            parts.append(pad)
            parts.append(json.dumps(key, ensure_ascii=False))
            parts.append(": ")
            _render(value, parts, indent, level + 1)
            parts.append(",\n" if i + 1 < len(obj) else "\n")
        parts.append(closing_pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            parts.append("[]")
            return
        parts.append("[\n")
        for i, value in enumerate(obj):
            parts.append(pad)
            _render(value, parts, indent, level + 1)
            parts.append(",\n" if i + 1 < len(obj) else "\n")
        parts.append(closing_pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_stable(obj: Any, indent: int = 2) -> str:
    """Serialize to JSON with deterministic layout and a trailing newline."""
    parts: list[str] = []
    _render(obj, parts, indent, 0)
    parts.append("\n")
    return "".join(parts)
