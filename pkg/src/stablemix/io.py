"""Serialization helpers; every float is written with 17 significant digits."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    # keep floats distinguishable from integers on round-trip
    return s if any(c in s for c in ".en") else s + ".0"


def to_plain(obj):
    """Convert numpy containers/scalars to plain Python objects."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj, indent: int | None = 2) -> str:
    """JSON text with 17-digit floats (``Infinity``/``NaN`` for non-finite)."""
    obj = to_plain(obj)

    def enc(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        sep = ", " if indent is None else ","
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return fmt_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [pad + json.dumps(k) + ": " + enc(v, level + 1) for k, v in o.items()]
            return "{" + sep.join(items) + end + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(isinstance(v, (int, float)) for v in o):
                return "[" + ", ".join(enc(v, level) for v in o) + "]"
            return "[" + sep.join(pad + enc(v, level + 1) for v in o) + end + "]"
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj, 0)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dumps(row, indent=None) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
