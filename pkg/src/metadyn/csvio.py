"""CSV writing with full round-trip number formatting."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

FIGURE_COLUMNS = ("x", "series_id", "mean", "stderr")
UNREACHED = "unreached"


def fmt(v) -> str:
    """Shortest decimal text that parses back to the identical value."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        return repr(f)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path):
    """``(header, rows)`` with every cell left as text."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def parse(cell: str):
    if cell in ("", UNREACHED):
        return None
    return float(cell)


def figure_rows(x, series_id, mean, stderr=None):
    """Rows for a figure-data CSV from parallel sequences (``stderr`` optional)."""
    x = list(x)
    mean = list(np.asarray(mean, dtype=float).ravel()) if not isinstance(mean, list) else mean
    se = [None] * len(x) if stderr is None else list(np.asarray(stderr, dtype=float).ravel())
    return [[xi, series_id, m, s] for xi, m, s in zip(x, mean, se)]
