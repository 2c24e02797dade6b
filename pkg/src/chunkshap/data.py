"""Tabular data loading, one-hot encoding, train/validation splits, and chunk partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import UsageError

Task = Literal["classification", "regression"]
MissingPolicy = Literal["drop", "mean"]

# Cell contents treated as a missing value (case-insensitive).
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "?"})


@dataclass(frozen=True)
class Schema:
    """How to interpret the columns of a CSV table."""

    target_column: str
    task: Task
    categorical_columns: tuple[str, ...] = ()
    timestamp_column: str | None = None
    delimiter: str = ","
    missing_policy: MissingPolicy = "drop"

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise UsageError(f"unknown task {self.task!r}")
        if self.missing_policy not in ("drop", "mean"):
            raise UsageError(f"unknown missing policy {self.missing_policy!r}")
        if self.target_column in self.categorical_columns:
            raise UsageError("target column cannot also be a categorical feature")
        if len(self.delimiter) != 1:
            raise UsageError("delimiter must be a single character")


@dataclass(frozen=True)
class RawTable:
    """A parsed CSV: header plus rows of raw cell strings."""

    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    @property
    def n(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> int:
        try:
            return self.header.index(name)
        except ValueError:
            raise UsageError(f"column {name!r} not found in header {list(self.header)}") from None


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


@dataclass(frozen=True)
class Dataset:
    """Encoded feature matrix plus targets, ready for model training.

    ``features`` is an n*f float matrix; classification targets are class
    indices, regression targets are reals. ``onehot_mask`` marks indicator
    columns produced by one-hot encoding; ``source_rows`` maps each row back
    to its line in the originating file (when loaded from one).
    """

    features: np.ndarray
    targets: np.ndarray
    task: Task
    timestamps: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    onehot_mask: np.ndarray | None = None
    class_names: tuple[str, ...] | None = None
    source_rows: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise UsageError(f"features must be a nonempty 2-D matrix, got shape {feats.shape}")
        if self.task == "classification":
            targs = np.asarray(self.targets, dtype=np.int64)
            if targs.size and targs.min() < 0:
                raise UsageError("classification targets must be class indices >= 0")
        else:
            targs = np.asarray(self.targets, dtype=np.float64)
        if targs.shape != (feats.shape[0],):
            raise UsageError("targets must be one value per row")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targs)
        if not self.feature_names:
            object.__setattr__(
                self, "feature_names", tuple(f"x{i}" for i in range(feats.shape[1]))
            )
        if len(self.feature_names) != feats.shape[1]:
            raise UsageError("feature_names length must match feature count")
        if self.onehot_mask is not None:
            mask = np.asarray(self.onehot_mask, dtype=bool)
            if mask.shape != (feats.shape[1],):
                raise UsageError("onehot_mask length must match feature count")
            object.__setattr__(self, "onehot_mask", mask)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def f(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.task != "classification":
            raise UsageError("num_classes is only defined for classification datasets")
        return int(self.targets.max()) + 1

    def take(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        """Row subset, preserving alignment of all per-row metadata."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            targets=self.targets[idx],
            task=self.task,
            timestamps=None if self.timestamps is None else self.timestamps[idx],
            feature_names=self.feature_names,
            onehot_mask=self.onehot_mask,
            class_names=self.class_names,
            source_rows=None if self.source_rows is None else self.source_rows[idx],
        )


@dataclass(frozen=True)
class ChunkPartition:
    """Disjoint groups of dataset rows, each valued as one player."""

    chunks: tuple[np.ndarray, ...]
    nominal_size: int | None
    mode: Literal["fixed", "daily", "monthly"]

    def __post_init__(self):
        chunks = tuple(np.asarray(c, dtype=np.int64) for c in self.chunks)
        if not chunks:
            raise UsageError("partition needs at least one chunk")
        seen = np.concatenate(chunks)
        if len(np.unique(seen)) != len(seen):
            raise UsageError("chunks must be pairwise disjoint")
        object.__setattr__(self, "chunks", chunks)

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.chunks], dtype=np.int64)

    @property
    def covered_rows(self) -> int:
        return int(self.sizes.sum())

    def row_span(self, j: int) -> tuple[int, int]:
        """(min, max+1) row bounds of chunk j, for reporting."""
        c = self.chunks[j]
        return int(c.min()), int(c.max()) + 1


def read_table(path: str | Path, schema: Schema) -> RawTable:
    """Parse a delimited UTF-8 file with a header row into raw cells."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"cannot read {path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path} is empty") from None
        header = tuple(h.strip() for h in header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            rows.append(tuple(cell.strip() for cell in row))
    table = RawTable(header=header, rows=tuple(rows))
    table.column(schema.target_column)
    for col in schema.categorical_columns:
        table.column(col)
    if schema.timestamp_column is not None:
        table.column(schema.timestamp_column)
    return table


def write_table(table: RawTable, path: str | Path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(table.header)
        writer.writerows(table.rows)


def parse_timestamp(cell: str) -> np.datetime64:
    """ISO-8601 ``YYYY-MM-DD[THH:MM[:SS]]``."""
    try:
        return np.datetime64(datetime.fromisoformat(cell), "s")
    except ValueError:
        raise UsageError(f"unparseable timestamp {cell!r}") from None


def encode_table(table: RawTable, schema: Schema) -> Dataset:
    """Numerically encode a raw table per the schema.

    Numeric feature columns keep their original order; each categorical
    column is expanded into one indicator per category, categories in
    lexicographic order, appended after the numeric block. Rows with a
    missing target (or a missing categorical/timestamp cell) are dropped;
    missing numeric cells follow the schema's missing policy.
    """
    target_idx = table.column(schema.target_column)
    cat_idx = {name: table.column(name) for name in schema.categorical_columns}
    ts_idx = table.column(schema.timestamp_column) if schema.timestamp_column else None
    special = {target_idx, *cat_idx.values()} | ({ts_idx} if ts_idx is not None else set())
    numeric_cols = [i for i in range(len(table.header)) if i not in special]

    kept_rows: list[int] = []
    for i, row in enumerate(table.rows):
        if _is_missing(row[target_idx]):
            continue
        if any(_is_missing(row[j]) for j in cat_idx.values()):
            continue
        if ts_idx is not None and _is_missing(row[ts_idx]):
            continue
        if schema.missing_policy == "drop" and any(_is_missing(row[j]) for j in numeric_cols):
            continue
        kept_rows.append(i)
    if not kept_rows:
        raise UsageError("no usable rows after applying the missing-value policy")

    n = len(kept_rows)
    numeric = np.empty((n, len(numeric_cols)), dtype=np.float64)
    for out_j, col in enumerate(numeric_cols):
        name = table.header[col]
        for out_i, i in enumerate(kept_rows):
            cell = table.rows[i][col]
            if _is_missing(cell):
                numeric[out_i, out_j] = np.nan
                continue
            try:
                numeric[out_i, out_j] = float(cell)
            except ValueError:
                raise UsageError(
                    f"non-numeric value {cell!r} in numeric column {name!r} "
                    f"(declare it in categorical_columns?)"
                ) from None

    if schema.missing_policy == "mean":
        numeric = _impute_column_means(numeric, [table.header[c] for c in numeric_cols])

    blocks = [numeric]
    names = [table.header[c] for c in numeric_cols]
    mask = [False] * len(numeric_cols)
    for cat_name, col in cat_idx.items():
        values = [table.rows[i][col] for i in kept_rows]
        categories = sorted(set(values))
        indicators = np.zeros((n, len(categories)), dtype=np.float64)
        lookup = {cat: k for k, cat in enumerate(categories)}
        for out_i, v in enumerate(values):
            indicators[out_i, lookup[v]] = 1.0
        blocks.append(indicators)
        names.extend(f"{cat_name}={cat}" for cat in categories)
        mask.extend([True] * len(categories))

    features = np.hstack(blocks)

    raw_targets = [table.rows[i][target_idx] for i in kept_rows]
    class_names = None
    if schema.task == "classification":
        class_names = tuple(sorted(set(raw_targets)))
        if len(class_names) < 2:
            raise UsageError("classification needs at least 2 target classes")
        lookup = {cls: k for k, cls in enumerate(class_names)}
        targets = np.array([lookup[v] for v in raw_targets], dtype=np.int64)
    else:
        try:
            targets = np.array([float(v) for v in raw_targets], dtype=np.float64)
        except ValueError:
            raise UsageError("regression target column contains non-numeric values") from None

    timestamps = None
    if ts_idx is not None:
        timestamps = np.array(
            [parse_timestamp(table.rows[i][ts_idx]) for i in kept_rows], dtype="datetime64[s]"
        )

    return Dataset(
        features=features,
        targets=targets,
        task=schema.task,
        timestamps=timestamps,
        feature_names=tuple(names),
        onehot_mask=np.array(mask, dtype=bool),
        class_names=class_names,
        source_rows=np.array(kept_rows, dtype=np.int64),
    )


def load_table(path: str | Path, schema: Schema) -> Dataset:
    """Read and encode a CSV file in one step."""
    return encode_table(read_table(path, schema), schema)


def _impute_column_means(matrix: np.ndarray, names: Sequence[str]) -> np.ndarray:
    out = matrix.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        missing = np.isnan(col)
        if not missing.any():
            continue
        if missing.all():
            raise UsageError(f"column {names[j]!r} has no observed values to impute from")
        col[missing] = col[~missing].mean()
    return out


def apply_missing_policy(ds: Dataset, policy: MissingPolicy) -> Dataset:
    """Resolve NaN feature cells by dropping rows or imputing column means."""
    missing = np.isnan(ds.features)
    if not missing.any():
        return ds
    if policy == "drop":
        keep = ~missing.any(axis=1)
        if not keep.any():
            raise UsageError("missing-value drop policy removed every row")
        return ds.take(np.flatnonzero(keep))
    if policy == "mean":
        features = _impute_column_means(ds.features, ds.feature_names)
        return Dataset(
            features=features,
            targets=ds.targets,
            task=ds.task,
            timestamps=ds.timestamps,
            feature_names=ds.feature_names,
            onehot_mask=ds.onehot_mask,
            class_names=ds.class_names,
            source_rows=ds.source_rows,
        )
    raise UsageError(f"unknown missing policy {policy!r}")


@dataclass(frozen=True)
class SplitResult:
    """Train/validation pair; unpacks as a 2-tuple."""

    train: Dataset
    validation: Dataset
    train_indices: np.ndarray
    validation_indices: np.ndarray
    stratified: bool
    warning: str | None = None

    def __iter__(self):
        return iter((self.train, self.validation))


def split_train_validation(ds: Dataset, validation_fraction: float, seed: int) -> SplitResult:
    """Deterministic held-out split.

    Classification data is stratified by class when every class has at least
    two rows (otherwise falls back to a plain shuffle, with a warning flag).
    Data with timestamps is split by time order instead: the last fraction
    becomes the validation set, so no future rows leak into training.
    """
    n = ds.n
    if n < 2:
        raise UsageError("need at least 2 rows to split")
    if not 0.0 < validation_fraction < 1.0:
        raise UsageError(f"validation fraction must be in (0,1), got {validation_fraction}")
    n_val = int(validation_fraction * n + 0.5)
    n_val = min(max(n_val, 1), n - 1)

    if ds.timestamps is not None:
        order = np.argsort(ds.timestamps, kind="stable")
        train_idx, val_idx = np.sort(order[: n - n_val]), np.sort(order[n - n_val :])
        return SplitResult(ds.take(train_idx), ds.take(val_idx), train_idx, val_idx, False)

    rng = np.random.default_rng(seed)
    warning = None
    stratified = False
    if ds.task == "classification":
        classes, counts = np.unique(ds.targets, return_counts=True)
        if counts.min() >= 2:
            stratified = True
            val_parts, train_parts = [], []
            for cls in classes:
                members = np.flatnonzero(ds.targets == cls)
                members = members[rng.permutation(len(members))]
                take = min(max(int(validation_fraction * len(members) + 0.5), 1), len(members) - 1)
                val_parts.append(members[:take])
                train_parts.append(members[take:])
            val_idx = np.sort(np.concatenate(val_parts))
            train_idx = np.sort(np.concatenate(train_parts))
            return SplitResult(ds.take(train_idx), ds.take(val_idx), train_idx, val_idx, True)
        warning = "a class has a single row; falling back to unstratified split"

    order = rng.permutation(n)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return SplitResult(ds.take(train_idx), ds.take(val_idx), train_idx, val_idx, stratified, warning)


def partition_fixed(ds: Dataset, chunk_size: int) -> ChunkPartition:
    """Consecutive chunks of ``chunk_size`` rows; the last may be smaller."""
    n = ds.n
    if not 1 <= chunk_size <= n:
        raise UsageError(f"chunk size must be in [1, {n}], got {chunk_size}")
    chunks = tuple(
        np.arange(start, min(start + chunk_size, n), dtype=np.int64)
        for start in range(0, n, chunk_size)
    )
    return ChunkPartition(chunks=chunks, nominal_size=chunk_size, mode="fixed")


def partition_temporal(ds: Dataset, granularity: Literal["daily", "monthly"]) -> ChunkPartition:
    """One chunk per calendar day or month, in chronological order."""
    if ds.timestamps is None:
        raise UsageError("temporal partitioning requires a timestamp column")
    if granularity not in ("daily", "monthly"):
        raise UsageError(f"unknown granularity {granularity!r}")
    unit = "datetime64[D]" if granularity == "daily" else "datetime64[M]"
    keys = ds.timestamps.astype(unit)
    groups: dict[np.datetime64, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    ordered = sorted(groups)
    chunks = tuple(np.array(groups[key], dtype=np.int64) for key in ordered)
    return ChunkPartition(
        chunks=chunks, nominal_size=None, mode="daily" if granularity == "daily" else "monthly"
    )
