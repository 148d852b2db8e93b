"""TSV matrices and run manifests.

Reals are written with 17 significant digits so that a write/read cycle is
exact.  A first row with any text cell after the first is a header; a
text first cell alone marks a header only when the next row starts with a
number.  A row-label column is detected by a text first data cell.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .model import DataMatrix, ModelError

FLOAT_FMT = "%.17g"


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_tsv(path) -> Tuple[np.ndarray, Optional[List[str]], Optional[List[str]]]:
    """Read a numeric matrix; returns (values, row_labels, col_labels).

    Raises ModelError naming the offending row and column when a cell is
    not a finite number or rows are ragged.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\r\n") for line in fh if line.strip()]
    if not lines:
        raise ModelError(f"{path}: empty file")
    rows = [line.split("\t") for line in lines]
    col_labels = None
    first = rows[0]
    if not all(_is_number(c) for c in first[1:]):
        has_header = True
    elif not _is_number(first[0]):
        # a text first cell is a row label unless the next row starts with a number
        has_header = len(rows) > 1 and _is_number(rows[1][0])
    else:
        has_header = False
    if has_header:
        col_labels = first
        rows = rows[1:]
    if not rows:
        raise ModelError(f"{path}: no data rows")
    row_labels = None
    if not _is_number(rows[0][0]):
        row_labels = [r[0] for r in rows]
        rows = [r[1:] for r in rows]
        if col_labels is not None and len(col_labels) == len(rows[0]) + 1:
            col_labels = col_labels[1:]
    width = len(rows[0])
    values = np.empty((len(rows), width))
    header_offset = 1 if col_labels is not None else 0
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ModelError(f"{path}: row {i + 1 + header_offset} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ModelError(
                    f"{path}: non-numeric value {cell!r} at row {i + 1 + header_offset}, column {j + 1}"
                ) from None
            if not np.isfinite(v):
                raise ModelError(f"{path}: non-finite value at row {i + 1 + header_offset}, column {j + 1}")
            values[i, j] = v
    if col_labels is not None and len(col_labels) != width:
        raise ModelError(f"{path}: header has {len(col_labels)} fields, data rows have {width}")
    return values, row_labels, col_labels


def read_matrix(path) -> np.ndarray:
    return read_tsv(path)[0]


def read_data_matrix(path) -> DataMatrix:
    values, rows, cols = read_tsv(path)
    return DataMatrix(values, rows, cols)


def write_tsv(path, values, header: Optional[Sequence[str]] = None,
              row_labels: Optional[Sequence[str]] = None) -> Path:
    """Write a 2-D array (or a vector as one column) with a trailing newline."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    path = Path(path)
    lines = []
    if header is not None:
        lines.append("\t".join(str(h) for h in header))
    for i, row in enumerate(values):
        cells = [FLOAT_FMT % v for v in row]
        if row_labels is not None:
            cells.insert(0, str(row_labels[i]))
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a mixed-type table; floats use the round-trip format."""
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return FLOAT_FMT % v
        return str(v)

    lines = ["\t".join(header)]
    lines.extend("\t".join(fmt(v) for v in row) for row in rows)
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(out_dir, command: str, config: dict, inputs: Sequence = (),
                   duration: Optional[float] = None, extra: Optional[dict] = None) -> Path:
    """manifest.json with the resolved config and input digests.

    Wall-clock duration is stored in a separate ``timing.json`` so that the
    manifest itself is byte-identical across reruns.
    """
    out_dir = Path(out_dir)
    payload = {
        "command": command,
        "config": config,
        "inputs": {os.path.basename(str(p)): sha256_file(p) for p in inputs},
        "tool": "shrinkfactor",
        "version": __version__,
    }
    if extra:
        payload.update(extra)
    path = write_json(out_dir / "manifest.json", payload)
    if duration is not None:
        write_json(out_dir / "timing.json", {"wall_clock_seconds": round(float(duration), 6)})
    return path
