"""Reading and writing datasets, designs, models and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .analysis import CensorScheme, MissingScheme, SimulationDesign
from .data import CensoredData
from .errors import FmsncError
from .mixture import MixtureModel


class ParseError(FmsncError, ValueError):
    """Malformed input file; ``row`` is 1-based counting the header as row 1."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class Dataset:
    """Parsed dataset plus the raw cell text (for byte-exact pass-through)."""

    data: CensoredData
    header: list
    rows: list

    @property
    def p(self):
        return self.data.p


def format_float(x) -> str:
    """Shortest text that parses back to the same double; infinities as empty."""
    if math.isinf(x) or math.isnan(x):
        return ""
    return repr(float(x))


def dataset_columns(p):
    return ([f"y{k}" for k in range(1, p + 1)] + [f"c{k}" for k in range(1, p + 1)]
            + [f"lo{k}" for k in range(1, p + 1)] + [f"hi{k}" for k in range(1, p + 1)])


def _number(text, default, row, col):
    text = text.strip()
    if text == "":
        return default
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row, col) from None


def read_dataset(path) -> Dataset:
    """Parse a CSV with columns ``y1..yp, c1..cp, lo1..lop, hi1..hip``.

    Indicators are 0/1; an empty ``lo`` cell means ``-inf`` and an empty
    ``hi`` cell ``+inf``, so a missing entry is ``c=1`` with both bounds
    empty.  The value cell of a censored entry is ignored.  Extra columns are
    carried along untouched.

    Raises
    ------
    ParseError
        With the offending row and column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    ys = [h for h in header if h[:1] == "y" and h[1:].isdigit()]
    p = len(ys)
    if p == 0:
        raise ParseError("no y1..yp columns", 1)
    index = {}
    for name in dataset_columns(p):
        if name not in header:
            raise ParseError("missing column", 1, name)
        index[name] = header.index(name)
    n = len(rows)
    if n == 0:
        raise ParseError("no data rows", 2)
    values = np.zeros((n, p))
    cens = np.zeros((n, p), bool)
    lower = np.full((n, p), -np.inf)
    upper = np.full((n, p), np.inf)
    for i, r in enumerate(rows):
        line = i + 2
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(r)}", line)
        for k in range(1, p + 1):
            c = r[index[f"c{k}"]].strip()
            if c not in ("0", "1"):
                raise ParseError(f"indicator must be 0 or 1, got {c!r}", line, f"c{k}")
            if c == "1":
                cens[i, k - 1] = True
                lo = _number(r[index[f"lo{k}"]], -np.inf, line, f"lo{k}")
                hi = _number(r[index[f"hi{k}"]], np.inf, line, f"hi{k}")
                if lo > hi:
                    raise ParseError("lower bound exceeds upper bound", line, f"lo{k}")
                lower[i, k - 1], upper[i, k - 1] = lo, hi
                values[i, k - 1] = np.nan
            else:
                v = _number(r[index[f"y{k}"]], None, line, f"y{k}")
                if v is None or not math.isfinite(v):
                    raise ParseError("observed value must be a finite number", line, f"y{k}")
                values[i, k - 1] = v
    return Dataset(CensoredData(values, cens, lower, upper), header, rows)


def write_dataset(path, data: CensoredData, extra=None):
    """Write ``data`` in the layout read by :func:`read_dataset`.

    ``extra`` maps additional column names to per-row strings.
    """
    p = data.p
    header = dataset_columns(p) + list(extra or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            c = data.censored[i]
            row = [("" if c[k] else format_float(data.values[i, k])) for k in range(p)]
            row += ["1" if ck else "0" for ck in c]
            row += [format_float(data.lower[i, k]) if c[k] else "" for k in range(p)]
            row += [format_float(data.upper[i, k]) if c[k] else "" for k in range(p)]
            row += [extra[name][i] for name in (extra or {})]
            w.writerow(row)


def design_to_dict(design: SimulationDesign):
    cs, ms = design.censor_scheme, design.missing_scheme
    censor = {"kind": cs.kind, "rate": cs.rate}
    if cs.bounds is not None:
        censor["bounds"] = [list(b) for b in cs.bounds]
    return {"model": design.model.to_dict(), "n": design.n, "censoring": censor,
            "missing": {"kind": ms.kind, "rate": ms.rate}, "seed": design.seed}


def design_from_dict(d) -> SimulationDesign:
    try:
        model = MixtureModel.from_dict(d["model"])
        c = d.get("censoring", {}) or {}
        m = d.get("missing", {}) or {}
        bounds = c.get("bounds")
        censor = CensorScheme(c.get("kind", "none"), float(c.get("rate", 0.0)),
                              tuple(map(tuple, bounds)) if bounds is not None else None)
        missing = MissingScheme(m.get("kind", "none"), float(m.get("rate", 0.0)))
        return SimulationDesign(model, int(d["n"]), censor, missing, int(d.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid design: {exc}") from exc


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from exc


def write_json(path, obj):
    text = json.dumps(obj, indent=2, allow_nan=False)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


__all__ = [
    "ParseError", "Dataset", "format_float", "dataset_columns", "read_dataset", "write_dataset",
    "design_to_dict", "design_from_dict", "read_json", "write_json",
]
