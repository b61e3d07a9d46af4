"""Canonical JSON serialization: sorted keys, 17-significant-digit floats.

Every artifact the toolkit writes goes through canonical_dumps, which makes
reruns byte-comparable: equal values always serialize to equal bytes.
"""
from __future__ import annotations

import json
import math
from pathlib import Path


def _render(obj, parts: list[str]) -> None:
    if obj is None or isinstance(obj, bool):
        parts.append(json.dumps(obj))
    elif isinstance(obj, int):
        parts.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite float {obj!r}")
        parts.append(format(obj, ".17g"))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(obj):
            if i:
                parts.append(", ")
            _render(item, parts)
        parts.append("]")
    elif isinstance(obj, dict):
        parts.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise ValueError(f"non-string key {key!r}")
            if i:
                parts.append(", ")
            parts.append(json.dumps(key) + ": ")
            _render(obj[key], parts)
        parts.append("}")
    else:
        raise ValueError(f"cannot serialize {type(obj).__name__}")


def canonical_dumps(obj) -> str:
    parts: list[str] = []
    _render(obj, parts)
    return "".join(parts)


def write_json(path, obj) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(canonical_dumps(obj) + "\n", encoding="utf-8")
    return p


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
