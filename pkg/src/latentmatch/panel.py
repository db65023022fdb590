"""Panel data ingestion and preprocessing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CollinearityError, InvalidDimensionError, InvalidInputError

__all__ = [
    "PanelData",
    "load_panel_csv",
    "write_panel",
    "residualize",
    "first_difference",
]


@dataclass
class PanelData:
    """Balanced panel in wide form.

    Attributes
    ----------
    units : list of str
    Y : ndarray of shape (N, T)
    times : list of str
    covariates : dict of str -> ndarray of shape (N,) or (N, T)
        Categorical codes (as strings).
    dropped : int
        Units removed because of missing outcomes.
    """

    units: list
    Y: np.ndarray
    times: list
    covariates: dict = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim != 2:
            raise InvalidDimensionError("outcomes must be an N x T matrix")
        if len(self.units) != self.Y.shape[0] or len(self.times) != self.Y.shape[1]:
            raise InvalidDimensionError("labels do not match the outcome matrix")

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]


def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r and any(c.strip() for c in r)]
    except StopIteration:
        raise InvalidInputError(f"{path}: empty file") from None
    except csv.Error as exc:
        raise InvalidInputError(f"{path}: malformed CSV ({exc})") from None
    header = [h.strip() for h in header]
    for j, r in enumerate(rows):
        if len(r) != len(header):
            raise InvalidInputError(f"{path}: row {j + 2} has {len(r)} fields, expected {len(header)}")
    return header, rows


def _num(s):
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan"):
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise InvalidInputError(f"non-numeric outcome {s!r}") from None


def load_panel_csv(path, unit: str = "unit", time: str = "time", y: str = "y",
                   covariates=(), layout: str = "auto") -> PanelData:
    """Read a long (``unit,time,y[,covariates]``) or wide (``unit,y1..yT``) CSV.

    A wide file may omit the unit column; rows are then numbered from 1.

    Units with a missing or non-finite outcome in any period are dropped so
    that the panel is balanced; ``PanelData.dropped`` reports their count.

    Parameters
    ----------
    path : path-like
    unit, time, y : str
        Column names of the long layout. In the wide layout the outcome
        columns are all columns starting with ``y`` other than covariates.
    covariates : sequence of str
        Categorical covariate columns to keep (long layout: per unit and period).
    layout : {"auto", "long", "wide"}
    """
    header, rows = _read_rows(path)
    covariates = list(covariates)
    for c in covariates:
        if c not in header:
            raise InvalidInputError(f"missing column {c!r}")
    if layout == "auto":
        layout = "long" if time in header and y in header else "wide"
    if unit not in header and layout == "wide":
        # wide files without ids get 1-based row numbers
        header = [unit] + header
        rows = [[str(j + 1)] + r for j, r in enumerate(rows)]
    if unit not in header:
        raise InvalidInputError(f"missing column {unit!r}")
    iu = header.index(unit)
    if layout == "long":
        if time not in header or y not in header:
            raise InvalidInputError(f"long layout needs columns {time!r} and {y!r}")
        it, iy = header.index(time), header.index(y)
        ic = [header.index(c) for c in covariates]
        units, times, cells, cov = [], [], {}, {}
        for r in rows:
            key = (r[iu].strip(), r[it].strip())
            if key in cells:
                raise InvalidInputError(f"duplicate (unit, time) key {key}")
            cells[key] = _num(r[iy])
            cov[key] = [r[j].strip() for j in ic]
            if key[0] not in units:
                units.append(key[0])
            if key[1] not in times:
                times.append(key[1])
        times = sorted(times, key=_time_key)
        Y = np.full((len(units), len(times)), np.nan)
        C = {c: np.full((len(units), len(times)), "", dtype=object) for c in covariates}
        for i, u in enumerate(units):
            for t, s in enumerate(times):
                if (u, s) in cells:
                    Y[i, t] = cells[(u, s)]
                    for c, v in zip(covariates, cov[(u, s)]):
                        C[c][i, t] = v
    elif layout == "wide":
        ycols = [j for j, h in enumerate(header) if j != iu and h not in covariates and h.startswith(y)]
        if not ycols:
            raise InvalidInputError("no outcome columns found")
        units = [r[iu].strip() for r in rows]
        if len(set(units)) != len(units):
            raise InvalidInputError("duplicate unit ids")
        times = [header[j][len(y):] or header[j] for j in ycols]
        Y = np.array([[_num(r[j]) for j in ycols] for r in rows]).reshape(len(rows), len(ycols))
        C = {c: np.array([r[header.index(c)].strip() for r in rows], dtype=object) for c in covariates}
    else:
        raise InvalidInputError(f"unknown layout {layout!r}")
    keep = np.all(np.isfinite(Y), axis=1)
    return PanelData(
        units=[u for u, k in zip(units, keep) if k],
        Y=Y[keep],
        times=list(times),
        covariates={c: v[keep] for c, v in C.items()},
        dropped=int(np.sum(~keep)),
    )


def _time_key(s):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def write_panel(path, panel: PanelData, y: str = "y") -> None:
    """Write a wide CSV ``unit,y<time>...`` with round-trip precision."""
    with open(path, "w", newline="") as fh:
        fh.write("unit," + ",".join(f"{y}{t}" for t in panel.times) + "\n")
        for u, row in zip(panel.units, panel.Y):
            fh.write(str(u) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _dummies(covariates):
    cols, names = [], []
    for name, codes in covariates.items():
        codes = np.asarray(codes).astype(str)
        levels = sorted(set(codes.tolist()))
        for lev in levels[1:]:
            cols.append((codes == lev).astype(float))
            names.append(f"{name}={lev}")
    return cols, names


def residualize(y, covariates) -> np.ndarray:
    """OLS residuals of ``y`` on an intercept and dummies of categorical covariates.

    One level per covariate (the first in sorted order) is dropped.

    Parameters
    ----------
    y : array-like of shape (n,)
    covariates : dict of str -> array-like of shape (n,)

    Raises
    ------
    CollinearityError
        If the dummy design is rank deficient; names the redundant columns.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    cols, names = _dummies(covariates)
    for c in cols:
        if c.size != n:
            raise InvalidDimensionError("covariates must have the length of y")
    X = np.column_stack([np.ones(n)] + cols)
    names = ["intercept"] + names
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        bad, kept = [], []
        for j in range(X.shape[1]):
            if np.linalg.matrix_rank(X[:, kept + [j]]) > len(kept):
                kept.append(j)
            else:
                bad.append(names[j])
        raise CollinearityError(f"collinear covariate columns: {', '.join(bad)}", columns=bad)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ beta


def first_difference(panel: PanelData) -> PanelData:
    """Panel of ``Y_t - Y_{t-1}`` labelled by the later period."""
    if panel.T < 2:
        raise InvalidDimensionError("first differences need T >= 2")
    cov = {c: (v[:, 1:] if np.ndim(v) == 2 else v) for c, v in panel.covariates.items()}
    return PanelData(list(panel.units), np.diff(panel.Y, axis=1), list(panel.times[1:]),
                     cov, panel.dropped)
