"""Datasets, CSV ingestion and labeled/unlabeled partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN, TEST, UNLABEL = "train", "test", "unlabel"
PARTITIONS = (TRAIN, TEST, UNLABEL)
PARTITION_COLUMN = "__partition"

# column roles accepted by load_csv
ROLES = ("feature", "categorical", "truth", "ignore")


class DataError(ValueError):
    """Raised for malformed input data."""


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional ground truth and partition tags.

    Rows tagged ``unlabel`` may carry ``nan`` truth. The object is immutable;
    all arrays are read-only views.
    """

    features: np.ndarray
    truth: np.ndarray | None = None
    partition: np.ndarray | None = None
    feature_names: tuple = ()
    truth_name: str = "truth"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        n, p = X.shape
        object.__setattr__(self, "features", _frozen(X))

        if self.truth is not None:
            t = np.asarray(self.truth, dtype=np.float64).ravel()
            if t.shape[0] != n:
                raise DataError(f"truth has length {t.shape[0]}, expected {n}")
            object.__setattr__(self, "truth", _frozen(t))

        part = self.partition
        if part is None:
            part = np.full(n, UNLABEL)
        part = np.asarray(part).astype("<U7")
        if part.shape != (n,):
            raise DataError(f"partition has shape {part.shape}, expected ({n},)")
        bad = set(np.unique(part)) - set(PARTITIONS)
        if bad:
            raise DataError(f"unknown partition tags {sorted(bad)}")
        object.__setattr__(self, "partition", _frozen(part))

        labeled = (part == TRAIN) | (part == TEST)
        if labeled.any():
            if self.truth is None or not np.all(np.isfinite(self.truth[labeled])):
                raise DataError("truth missing on a labeled (train/test) row")

        names = tuple(self.feature_names) or tuple(f"f{j}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} features")
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    def mask(self, *tags):
        return np.isin(self.partition, tags)

    def rows(self, *tags):
        return np.flatnonzero(self.mask(*tags))

    def take(self, rows):
        """Return a new dataset made of ``rows`` (duplicates allowed)."""
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            self.features[rows],
            None if self.truth is None else self.truth[rows],
            self.partition[rows],
            self.feature_names,
            self.truth_name,
        )

    def with_partition(self, partition):
        return Dataset(self.features, self.truth, partition, self.feature_names, self.truth_name)

    def counts(self):
        return {tag: int(np.sum(self.partition == tag)) for tag in PARTITIONS}


@dataclass(frozen=True)
class EconSample:
    """Regression sample for ``y = x*beta_x + Z*beta_z + eps``.

    ``controls`` carries the intercept as its first column.
    """

    y: np.ndarray
    x: np.ndarray
    controls: np.ndarray
    row_ids: np.ndarray = field(default=None)
    x_name: str = "x"
    control_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        x = np.asarray(self.x, dtype=np.float64).ravel()
        Z = np.asarray(self.controls, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        m = y.shape[0]
        if x.shape[0] != m or Z.shape[0] != m:
            raise DataError("y, x and controls must have the same number of rows")
        if not np.all(Z[:, 0] == 1.0):
            raise DataError("first control column must be the all-ones intercept")
        ids = np.arange(m) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.intp)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "controls", _frozen(Z))
        object.__setattr__(self, "row_ids", _frozen(ids))
        names = tuple(self.control_names) or ("const",) + tuple(
            f"z{j}" for j in range(1, Z.shape[1])
        )
        object.__setattr__(self, "control_names", names)

    @property
    def m(self):
        return self.y.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return EconSample(
            self.y[rows], self.x[rows], self.controls[rows], self.row_ids[rows],
            self.x_name, self.control_names,
        )

    def with_x(self, x, name=None):
        return EconSample(
            self.y, x, self.controls, self.row_ids, name or self.x_name, self.control_names
        )


def _parse_float(cell, column, line):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} in column {column!r} (line {line})") from None
    return v


def load_csv(path, schema=None):
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Parameters
    ----------
    path : str or Path
    schema : dict, optional
        Maps column name to one of ``feature`` (numeric), ``categorical``
        (ordinal-encoded by first appearance), ``truth`` or ``ignore``.
        Columns absent from the schema are ignored. Without a schema every
        column is a numeric feature. A ``__partition`` column, when present,
        restores the partition tags written by :func:`save_csv`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("missing header row") from None
        records = [r for r in reader if r]

    if schema is None:
        schema = {c: "feature" for c in header if c != PARTITION_COLUMN}
    for col, role in schema.items():
        if role not in ROLES:
            raise DataError(f"unknown role {role!r} for column {col!r}")
        if col not in header:
            raise DataError(f"missing column {col!r} named in schema")
    if not records:
        raise DataError("zero data rows")
    truth_cols = [c for c, r in schema.items() if r == "truth"]
    if len(truth_cols) > 1:
        raise DataError("at most one truth column")

    pos = {c: k for k, c in enumerate(header)}
    for line, rec in enumerate(records, start=2):
        if len(rec) != len(header):
            raise DataError(f"line {line} has {len(rec)} cells, header has {len(header)}")

    feat_cols = [c for c in header if schema.get(c) in ("feature", "categorical")]
    if not feat_cols:
        raise DataError("schema names no feature columns")
    X = np.empty((len(records), len(feat_cols)))
    for j, col in enumerate(feat_cols):
        k = pos[col]
        if schema[col] == "categorical":
            codes = {}
            for i, rec in enumerate(records):
                cell = rec[k].strip()
                if cell == "":
                    raise DataError(f"missing value in column {col!r} (line {i + 2})")
                X[i, j] = codes.setdefault(cell, len(codes))
        else:
            for i, rec in enumerate(records):
                cell = rec[k].strip()
                if cell == "":
                    raise DataError(f"missing value in column {col!r} (line {i + 2})")
                X[i, j] = _parse_float(cell, col, i + 2)
    if not np.all(np.isfinite(X)):
        raise DataError("features contain non-finite values")

    truth = None
    truth_name = "truth"
    if truth_cols:
        truth_name = truth_cols[0]
        k = pos[truth_name]
        truth = np.array(
            [math.nan if rec[k].strip() == "" else _parse_float(rec[k], truth_name, i + 2)
             for i, rec in enumerate(records)]
        )

    partition = None
    if PARTITION_COLUMN in pos:
        k = pos[PARTITION_COLUMN]
        partition = np.array([rec[k].strip() for rec in records])

    return Dataset(X, truth, partition, tuple(feat_cols), truth_name)


def save_csv(d, path):
    """Write features, truth and the ``__partition`` column.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        head = list(d.feature_names)
        if d.truth is not None:
            head.append(d.truth_name)
        head.append(PARTITION_COLUMN)
        w.writerow(head)
        for i in range(d.n):
            row = [repr(float(v)) for v in d.features[i]]
            if d.truth is not None:
                t = d.truth[i]
                row.append("" if math.isnan(t) else repr(float(t)))
            row.append(str(d.partition[i]))
            w.writerow(row)


def split(d, n_train, n_test, seed):
    """Randomly tag ``n_train`` rows train, ``n_test`` test, the rest unlabel.

    Labeled rows are drawn uniformly without replacement among rows that
    carry a finite truth value.
    """
    n_train, n_test = int(n_train), int(n_test)
    if n_train < 0 or n_test < 0:
        raise DataError("partition sizes must be non-negative")
    if n_train + n_test > d.n:
        raise DataError(f"insufficient rows: requested {n_train + n_test}, have {d.n}")
    if d.truth is None:
        if n_train + n_test > 0:
            raise DataError("truth missing on a labeled row")
        eligible = np.arange(d.n)
    else:
        eligible = np.flatnonzero(np.isfinite(d.truth))
    if n_train + n_test > eligible.size:
        raise DataError(
            f"truth missing on a labeled row: only {eligible.size} rows carry truth, "
            f"{n_train + n_test} requested"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(eligible)[: n_train + n_test]
    part = np.full(d.n, UNLABEL, dtype="<U7")
    part[chosen[:n_train]] = TRAIN
    part[chosen[n_train:]] = TEST
    return d.with_partition(part)
