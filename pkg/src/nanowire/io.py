"""Deterministic CSV and JSON artifact writing and reading.

CSV files begin with '#'-prefixed header lines (tool version, config hash,
grid descriptor, column schema), use LF line endings, '.' decimal points and
17 significant digits, so reruns with identical inputs are byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["format_float", "write_csv", "read_csv", "write_json"]


def format_float(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path, columns: list[str], rows, meta: dict) -> Path:
    """Write a data table with a reproducible header block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# tool: nanowire-sim {__version__}"]
    for key in sorted(meta):
        lines.append(f"# {key}: {meta[key]}")
    lines.append(f"# columns: {','.join(columns)}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, (int, float, np.floating))
                              and not isinstance(v, bool) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def read_csv(path) -> tuple[dict, list[str], np.ndarray]:
    """Read a table written by ``write_csv``: (metadata, columns, data)."""
    meta: dict = {}
    columns: list[str] = []
    data_rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, val = body.split(":", 1)
                    meta[key.strip()] = val.strip()
                continue
            if not columns:
                columns = line.split(",")
                continue
            data_rows.append([float(v) for v in line.split(",")])
    return meta, columns, np.asarray(data_rows)


def write_json(path, obj: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(obj)
    payload["_meta"] = {"tool": f"nanowire-sim {__version__}", **(meta or {})}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path
