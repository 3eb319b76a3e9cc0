"""Deterministic report writing: floats at 12 significant digits.

Reports must be byte-identical across runs with the same inputs and seed,
so no timestamps or timings belong in any file written here; NaN becomes
JSON null.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def round12(x: float) -> float:
    return float(f"{float(x):.12g}")


def canon(obj):
    """Recursively JSON-ready: arrays to lists, floats rounded, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [canon(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        if math.isnan(val):
            return None
        if math.isinf(val):
            return "inf" if val > 0 else "-inf"
        return round12(val)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(canon(obj), indent=2, sort_keys=True) + "\n")


def fmt_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        if math.isnan(float(value)):
            return ""
        return f"{float(value):.12g}"
    return str(value)


def dump_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt_cell(c) for c in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")
