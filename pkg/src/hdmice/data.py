"""Numeric tables with explicit missingness masks, plus the small shared
statistics every imputation strategy leans on (standardization, pairwise
correlation, response indicators) and CSV ingestion.

Missing cells are tracked by a boolean mask rather than a sentinel, so a
computed cell can legitimately hold any float. CSV files use an empty field
or the literal token ``NA`` for missing values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

MISSING_TOKENS = frozenset({"", "NA"})


class DataError(ValueError):
    """Invalid table, mask, or CSV content."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """An n x p table of float64 values with named columns.

    Cells flagged missing by an accompanying :class:`MissingMask` may hold
    anything (typically NaN straight after CSV ingestion); every other cell
    must be finite.
    """

    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        n, p = values.shape
        if n < 1 or p < 1:
            raise DataError(f"need at least one row and one column, got {n}x{p}")
        if len(self.columns) != p:
            raise DataError(f"{len(self.columns)} column names for {p} columns")
        if len(set(self.columns)) != p:
            raise DataError("column names must be unique")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise DataError(f"no column named {name!r}") from None


@dataclass(frozen=True, eq=False)
class MissingMask:
    """Boolean n x p mask (True = missing) plus the ordered target columns.

    The mask must be False everywhere outside the target columns.
    """

    mask: np.ndarray
    target_columns: tuple[int, ...]

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "target_columns", tuple(int(j) for j in self.target_columns))
        if mask.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {mask.shape}")
        p = mask.shape[1]
        for j in self.target_columns:
            if not 0 <= j < p:
                raise DataError(f"target column {j} out of range for p={p}")
        if len(set(self.target_columns)) != len(self.target_columns):
            raise DataError("target columns must be distinct")
        outside = np.ones(p, dtype=bool)
        outside[list(self.target_columns)] = False
        if mask[:, outside].any():
            raise DataError("mask is set outside the declared target columns")

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())


def validate_observed(data: Dataset, mask: MissingMask) -> None:
    """Check mask/table coherence: shapes agree and observed cells are finite."""
    if mask.mask.shape != data.values.shape:
        raise DataError(
            f"mask shape {mask.mask.shape} does not match data shape {data.values.shape}"
        )
    observed = data.values[~mask.mask]
    if not np.all(np.isfinite(observed)):
        raise DataError("non-missing cells must be finite")


def response_indicator(data: Dataset, mask: MissingMask, j: int) -> np.ndarray:
    """0/1 vector of length n, 1 where cell (i, j) is missing."""
    if j not in mask.target_columns:
        raise DataError(f"column {j} is not a target column")
    return mask.mask[:, j].astype(np.float64)


@dataclass(frozen=True, eq=False)
class Standardization:
    """Per-column centers and scales; scale of a constant column is replaced
    by 1 and the column flagged degenerate (its standardized values are 0)."""

    centers: np.ndarray
    scales: np.ndarray
    degenerate: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        degenerate = self.degenerate
        if degenerate is None:
            degenerate = np.zeros(centers.shape, dtype=bool)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "degenerate", np.asarray(degenerate, dtype=bool))
        if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise DataError("scales must be strictly positive and finite")

    def apply(self, columns: np.ndarray) -> np.ndarray:
        out = (np.asarray(columns, dtype=np.float64) - self.centers) / self.scales
        if self.degenerate.any():
            out[:, self.degenerate] = 0.0
        return out

    def invert(self, columns: np.ndarray) -> np.ndarray:
        return np.asarray(columns, dtype=np.float64) * self.scales + self.centers


def standardize(columns: np.ndarray) -> tuple[np.ndarray, Standardization]:
    """Center to mean 0 and scale to unit sample variance (n-1 denominator).

    Constant columns become all-zero and are flagged degenerate rather than
    raising, so callers can apply strategy-specific handling.
    """
    x = np.asarray(columns, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise DataError("standardize expects a non-empty 2-D matrix")
    centers = x.mean(axis=0)
    if x.shape[0] > 1:
        scales = x.std(axis=0, ddof=1)
    else:
        scales = np.zeros(x.shape[1])
    degenerate = ~(scales > 0) | ~np.isfinite(scales)
    scales = np.where(degenerate, 1.0, scales)
    std = Standardization(centers=centers, scales=scales, degenerate=degenerate)
    return std.apply(x), std


def pairwise_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation over the rows where both entries are non-NaN.

    Returns NaN (never raises) when fewer than 3 complete pairs exist or
    either side is constant on the complete pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    both = np.isfinite(x) & np.isfinite(y)
    if both.sum() < 3:
        return float("nan")
    xs = x[both]
    ys = y[both]
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    sx = float(xd @ xd)
    sy = float(yd @ yd)
    if sx <= 0.0 or sy <= 0.0:
        return float("nan")
    r = float(xd @ yd) / np.sqrt(sx * sy)
    return float(min(1.0, max(-1.0, r)))


def format_value(x: float) -> str:
    """Shortest round-trip decimal representation (stable across reruns)."""
    return repr(float(x))


def read_csv(path) -> tuple[Dataset, MissingMask]:
    """Read a headed numeric CSV; empty fields or ``NA`` denote missing.

    Missing cells are stored as NaN; the returned mask marks them and its
    target columns are exactly the columns containing at least one hole.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        columns = tuple(name.strip() for name in header)
        rows = []
        missing_rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            vals = np.empty(len(columns))
            miss = np.zeros(len(columns), dtype=bool)
            for k, tok in enumerate(row):
                tok = tok.strip()
                if tok in MISSING_TOKENS:
                    vals[k] = np.nan
                    miss[k] = True
                else:
                    try:
                        vals[k] = float(tok)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad numeric field {tok!r}") from None
            rows.append(vals)
            missing_rows.append(miss)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.vstack(rows)
    mask = np.vstack(missing_rows)
    targets = tuple(int(j) for j in np.nonzero(mask.any(axis=0))[0])
    data = Dataset(values=values, columns=columns)
    mm = MissingMask(mask=mask, target_columns=targets)
    validate_observed(data, mm)
    return data, mm


def write_csv(path, data: Dataset, mask: MissingMask | None = None) -> None:
    """Write a dataset as CSV, emitting ``NA`` for masked cells."""
    miss = mask.mask if mask is not None else None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.columns)
        for i in range(data.n):
            row = []
            for k in range(data.p):
                if miss is not None and miss[i, k]:
                    row.append("NA")
                else:
                    row.append(format_value(data.values[i, k]))
            writer.writerow(row)
