"""Delimited-text helpers shared by the loaders and report writers."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def sniff_delimiter(first_line: str) -> str:
    return "\t" if "\t" in first_line else ","


def read_rows(path: str | Path) -> list[list[str]]:
    """Read a comma- or tab-delimited file (auto-detected from the first line)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        return []
    reader = csv.reader(io.StringIO(text), delimiter=sniff_delimiter(lines[0]))
    return [row for row in reader if row and any(cell.strip() for cell in row)]


def parse_float(cell: str, where: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan", "null", "none"):
        return np.nan
    if cell.lower() in ("inf", "+inf", "infinity"):
        return np.inf
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"malformed numeric cell {cell!r} at {where}") from None


def read_labeled_matrix(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a matrix with an identifier header row and identifier first column.

    Empty or NaN cells become ``nan``.
    """
    rows = read_rows(path)
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    col_ids = [c.strip() for c in rows[0][1:]]
    row_ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        row_ids.append(row[0].strip())
        cells = row[1:] + [""] * (len(col_ids) - len(row) + 1)
        values.append([parse_float(c, f"{path}:{r}:{j + 2}") for j, c in enumerate(cells[:len(col_ids)])])
    return row_ids, col_ids, np.array(values, dtype=np.float64).reshape(len(row_ids), len(col_ids))


def format_float(x: float) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def write_labeled_matrix(path: str | Path, row_ids: Sequence[str], col_ids: Sequence[str], values: np.ndarray,
                         corner: str = "id", delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([corner, *col_ids])
        for rid, row in zip(row_ids, values):
            w.writerow([rid, *(format_float(v) for v in row)])


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], delimiter: str = "\t") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(c) if isinstance(c, float) else c for c in row])
