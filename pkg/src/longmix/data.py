"""Longitudinal dataset representation and long-format CSV ingestion.

One row per observation; rows are grouped by subject id preserving file
order, so results are deterministic for a given file.  Datasets are
treated as immutable after construction and cache pooled arrays
(stacked responses/designs plus per-subject row offsets) that the
fitting code consumes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import (
    ArgumentError,
    DegenerateColumnError,
    EmptyInputError,
    ParseError,
    SchemaError,
)

__all__ = [
    "SubjectBlock",
    "LongitudinalDataset",
    "Standardization",
    "ColumnSchema",
    "load_csv",
    "write_csv",
    "standardize",
    "destandardize",
]


@dataclass(frozen=True)
class SubjectBlock:
    subject_id: str
    y: np.ndarray  # (m,)
    X: np.ndarray  # (m, p)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ArgumentError(
                f"subject {self.subject_id!r}: X rows must align with y entries"
            )
        if y.shape[0] < 1:
            raise ArgumentError(f"subject {self.subject_id!r} has no observations")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def m(self) -> int:
        return self.y.shape[0]


class LongitudinalDataset:
    """n independent subjects, each with m_i observations of (y, x)."""

    def __init__(self, subjects: list[SubjectBlock], columns: list[str]):
        if len(subjects) < 1:
            raise EmptyInputError("dataset must contain at least one subject")
        p = subjects[0].X.shape[1]
        if len(columns) != p:
            raise SchemaError(
                f"{len(columns)} column names for {p} covariate columns"
            )
        for s in subjects:
            if s.X.shape[1] != p:
                raise ArgumentError(
                    f"subject {s.subject_id!r} has {s.X.shape[1]} covariates, expected {p}"
                )
            if not (np.all(np.isfinite(s.y)) and np.all(np.isfinite(s.X))):
                raise ParseError(
                    f"non-finite value in subject {s.subject_id!r}"
                )
        self.subjects = list(subjects)
        self.columns = list(columns)
        # pooled cache
        self.Y = np.concatenate([s.y for s in self.subjects])
        self.X = np.vstack([s.X for s in self.subjects])
        self.m = np.array([s.m for s in self.subjects], dtype=int)
        self.row_starts = np.concatenate(([0], np.cumsum(self.m)[:-1]))
        self.subject_index = np.repeat(np.arange(self.n), self.m)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def total_obs(self) -> int:
        return int(self.m.sum())

    def subject_sums(self, rows: np.ndarray) -> np.ndarray:
        """Sum a per-row array (first axis = pooled rows) within subjects."""
        return np.add.reduceat(rows, self.row_starts, axis=0)


@dataclass(frozen=True)
class Standardization:
    """Invertible per-column affine transform (pooled moments)."""

    center: np.ndarray
    scale: np.ndarray
    y_center: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0) or self.y_scale <= 0:
            raise ArgumentError("standardization scales must be positive")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV columns to dataset roles."""

    id_col: str
    y_col: str
    x_cols: list[str]
    constant_cols: tuple[str, ...] = ()  # exempt from the zero-variance check


def load_csv(path, schema: ColumnSchema) -> LongitudinalDataset:
    """Read a long-format CSV, grouping rows by subject in file order."""
    try:
        df = pd.read_csv(
            path, dtype={schema.id_col: str}, float_precision="round_trip"
        )
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path}: empty file") from None
    except FileNotFoundError:
        raise ArgumentError(f"{path}: file not found") from None
    if df.shape[0] == 0:
        raise EmptyInputError(f"{path}: no data rows")
    needed = [schema.id_col, schema.y_col, *schema.x_cols]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    num_cols = [schema.y_col, *schema.x_cols]
    for c in num_cols:
        vals = pd.to_numeric(df[c], errors="coerce")
        bad = ~np.isfinite(vals.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0]) + 2  # header is line 1
            raise ParseError(
                f"{path}: non-numeric or non-finite value in column {c!r} at line {row}",
                row=row,
            )
        df[c] = vals.astype(float)

    subjects = []
    ids = df[schema.id_col].to_numpy()
    # stable grouping preserving first-appearance order
    order = {}
    for sid in ids:
        order.setdefault(sid, len(order))
    for sid in sorted(order, key=order.get):
        block = df[ids == sid]
        subjects.append(
            SubjectBlock(
                subject_id=str(sid),
                y=block[schema.y_col].to_numpy(dtype=float),
                X=block[schema.x_cols].to_numpy(dtype=float),
            )
        )
    return LongitudinalDataset(subjects, list(schema.x_cols))


def write_csv(data: LongitudinalDataset, path, schema: ColumnSchema) -> None:
    """Write a dataset back to long-format CSV with round-trip floats."""
    buf = io.StringIO()
    header = [schema.id_col, schema.y_col, *schema.x_cols]
    buf.write(",".join(header) + "\n")
    for s in data.subjects:
        for j in range(s.m):
            cells = [s.subject_id, repr(float(s.y[j]))]
            cells.extend(repr(float(v)) for v in s.X[j])
            buf.write(",".join(cells) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def standardize(
    data: LongitudinalDataset,
    include_response: bool = False,
    exempt_cols: tuple[str, ...] = (),
):
    """Center/scale each covariate column to pooled mean 0, sd 1.

    Pooled (all-observations) moments with population (1/N) variance are
    used, so coefficient back-transformation is exact.  Columns named in
    ``exempt_cols`` (e.g. an intercept) are passed through unchanged.
    """
    center = data.X.mean(axis=0)
    scale = data.X.std(axis=0)
    for j, name in enumerate(data.columns):
        if name in exempt_cols:
            center[j] = 0.0
            scale[j] = 1.0
        elif scale[j] == 0.0:
            raise DegenerateColumnError(
                f"column {name!r} has zero pooled standard deviation"
            )
    if include_response:
        y_center = float(data.Y.mean())
        y_scale = float(data.Y.std())
        if y_scale == 0.0:
            raise DegenerateColumnError("response has zero pooled standard deviation")
    else:
        y_center, y_scale = 0.0, 1.0
    std = Standardization(center=center, scale=scale, y_center=y_center, y_scale=y_scale)
    subjects = [
        SubjectBlock(
            subject_id=s.subject_id,
            y=(s.y - y_center) / y_scale,
            X=(s.X - center) / scale,
        )
        for s in data.subjects
    ]
    return LongitudinalDataset(subjects, data.columns), std


def destandardize(data: LongitudinalDataset, std: Standardization) -> LongitudinalDataset:
    """Invert :func:`standardize`."""
    subjects = [
        SubjectBlock(
            subject_id=s.subject_id,
            y=s.y * std.y_scale + std.y_center,
            X=s.X * std.scale + std.center,
        )
        for s in data.subjects
    ]
    return LongitudinalDataset(subjects, data.columns)
