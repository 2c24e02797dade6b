"""Controlled data-quality defects with ground-truth masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import Dataset, RawTable, Schema, _is_missing
from .errors import UsageError

CorruptionKind = Literal["gaussian_noise", "label_flip", "missing"]


@dataclass(frozen=True)
class CorruptionReport:
    """Ground truth of an injection: which rows were touched and how."""

    kind: CorruptionKind
    affected_rows: np.ndarray
    fraction: float
    seed: int
    sigma: float | None = None
    cells: tuple[tuple[int, int], ...] | None = None  # (row, column) pairs for missing cells

    def __post_init__(self):
        rows = np.sort(np.asarray(self.affected_rows, dtype=np.int64))
        if len(np.unique(rows)) != len(rows):
            raise UsageError("affected rows must be distinct")
        object.__setattr__(self, "affected_rows", rows)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "affected_rows": self.affected_rows.tolist(),
            "parameters": {"fraction": self.fraction},
            "seed": self.seed,
        }
        if self.sigma is not None:
            out["parameters"]["sigma"] = self.sigma
        if self.cells is not None:
            out["cells"] = [list(c) for c in self.cells]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionReport":
        return cls(
            kind=d["kind"],
            affected_rows=np.asarray(d["affected_rows"], dtype=np.int64),
            fraction=d["parameters"]["fraction"],
            seed=d["seed"],
            sigma=d["parameters"].get("sigma"),
            cells=tuple(tuple(c) for c in d["cells"]) if "cells" in d else None,
        )


def _affected_count(n: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    return int(fraction * n + 0.5)


def _choose_rows(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    count = _affected_count(n, fraction)
    if count < 1:
        raise UsageError(f"fraction {fraction} selects no rows out of {n}")
    return np.sort(rng.choice(n, size=count, replace=False))


def inject_gaussian_noise(
    ds: Dataset, fraction: float, sigma: float, seed: int
) -> tuple[Dataset, CorruptionReport]:
    """Add zero-mean Gaussian noise (std = sigma * per-feature std) to chosen rows.

    Only numeric, non-indicator feature columns are perturbed; targets and
    untouched rows are left bitwise identical.
    """
    if sigma <= 0:
        raise UsageError("sigma must be > 0")
    numeric = (
        np.ones(ds.f, dtype=bool) if ds.onehot_mask is None else ~ds.onehot_mask
    )
    if not numeric.any():
        raise UsageError("dataset has no numeric (non-indicator) features to perturb")
    rng = np.random.default_rng(seed)
    rows = _choose_rows(ds.n, fraction, rng)
    scales = sigma * ds.features[:, numeric].std(axis=0)
    noise = rng.normal(0.0, 1.0, size=(len(rows), int(numeric.sum()))) * scales
    features = ds.features.copy()
    block = features[np.ix_(rows, np.flatnonzero(numeric))]
    features[np.ix_(rows, np.flatnonzero(numeric))] = block + noise
    corrupted = Dataset(
        features=features,
        targets=ds.targets,
        task=ds.task,
        timestamps=ds.timestamps,
        feature_names=ds.feature_names,
        onehot_mask=ds.onehot_mask,
        class_names=ds.class_names,
        source_rows=ds.source_rows,
    )
    return corrupted, CorruptionReport("gaussian_noise", rows, fraction, seed, sigma=sigma)


def flip_labels(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, CorruptionReport]:
    """Replace chosen rows' labels with a uniformly drawn different class."""
    if ds.task != "classification":
        raise UsageError("label flipping requires a classification dataset")
    k = ds.num_classes
    if k < 2:
        raise UsageError("label flipping needs at least 2 classes")
    rng = np.random.default_rng(seed)
    rows = _choose_rows(ds.n, fraction, rng)
    targets = ds.targets.copy()
    offsets = rng.integers(1, k, size=len(rows))
    targets[rows] = (targets[rows] + offsets) % k
    corrupted = Dataset(
        features=ds.features,
        targets=targets,
        task=ds.task,
        timestamps=ds.timestamps,
        feature_names=ds.feature_names,
        onehot_mask=ds.onehot_mask,
        class_names=ds.class_names,
        source_rows=ds.source_rows,
    )
    return corrupted, CorruptionReport("label_flip", rows, fraction, seed)


def inject_missing(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, CorruptionReport]:
    """Mark one uniformly chosen feature cell per chosen row as missing (NaN)."""
    rng = np.random.default_rng(seed)
    rows = _choose_rows(ds.n, fraction, rng)
    cols = rng.integers(0, ds.f, size=len(rows))
    features = ds.features.copy()
    features[rows, cols] = np.nan
    corrupted = Dataset(
        features=features,
        targets=ds.targets,
        task=ds.task,
        timestamps=ds.timestamps,
        feature_names=ds.feature_names,
        onehot_mask=ds.onehot_mask,
        class_names=ds.class_names,
        source_rows=ds.source_rows,
    )
    cells = tuple((int(r), int(c)) for r, c in zip(rows, cols))
    return corrupted, CorruptionReport("missing", rows, fraction, seed, cells=cells)


def corrupt_table(
    table: RawTable,
    schema: Schema,
    kind: CorruptionKind,
    fraction: float,
    seed: int,
    sigma: float | None = None,
) -> tuple[RawTable, CorruptionReport]:
    """File-level corruption: same defect kinds applied to raw cells.

    Untouched cells keep their exact original text, so a line diff against
    the input file recovers the affected-row mask.
    """
    n = table.n
    if n < 1:
        raise UsageError("table has no rows")
    rng = np.random.default_rng(seed)
    target_idx = table.column(schema.target_column)
    special = {target_idx}
    special.update(table.column(c) for c in schema.categorical_columns)
    if schema.timestamp_column:
        special.add(table.column(schema.timestamp_column))
    feature_cols = [i for i in range(len(table.header)) if i not in special]
    rows = [list(r) for r in table.rows]

    if kind == "label_flip":
        if schema.task != "classification":
            raise UsageError("label flipping requires a classification schema")
        classes = sorted({r[target_idx] for r in table.rows if not _is_missing(r[target_idx])})
        if len(classes) < 2:
            raise UsageError("label flipping needs at least 2 classes")
        eligible = np.array(
            [i for i, r in enumerate(table.rows) if not _is_missing(r[target_idx])]
        )
        count = _affected_count(n, fraction)
        if count > len(eligible):
            raise UsageError("fraction selects more rows than have a usable target")
        affected = np.sort(rng.choice(eligible, size=count, replace=False))
        lookup = {c: i for i, c in enumerate(classes)}
        offsets = rng.integers(1, len(classes), size=count)
        for r, off in zip(affected, offsets):
            old = lookup[rows[r][target_idx]]
            rows[r][target_idx] = classes[(old + off) % len(classes)]
        report = CorruptionReport("label_flip", affected, fraction, seed)

    elif kind == "gaussian_noise":
        if sigma is None or sigma <= 0:
            raise UsageError("gaussian noise needs sigma > 0")
        if not feature_cols:
            raise UsageError("no numeric feature columns to perturb")
        col_std = {}
        for col in feature_cols:
            vals = []
            for r in table.rows:
                if _is_missing(r[col]):
                    continue
                try:
                    vals.append(float(r[col]))
                except ValueError:
                    raise UsageError(
                        f"non-numeric value {r[col]!r} in column {table.header[col]!r}"
                    ) from None
            col_std[col] = float(np.std(vals)) if vals else 0.0
        affected = _choose_rows(n, fraction, rng)
        for r in affected:
            deltas = rng.normal(0.0, 1.0, size=len(feature_cols))
            for col, delta in zip(feature_cols, deltas):
                if _is_missing(rows[r][col]):
                    continue
                rows[r][col] = repr(float(rows[r][col]) + float(delta) * sigma * col_std[col])
        report = CorruptionReport("gaussian_noise", affected, fraction, seed, sigma=sigma)

    elif kind == "missing":
        if not feature_cols:
            raise UsageError("no feature columns to blank")
        affected = _choose_rows(n, fraction, rng)
        picks = rng.integers(0, len(feature_cols), size=len(affected))
        cells = []
        for r, p in zip(affected, picks):
            rows[r][feature_cols[p]] = ""
            cells.append((int(r), feature_cols[p]))
        report = CorruptionReport("missing", affected, fraction, seed, cells=tuple(cells))

    else:
        raise UsageError(f"unknown corruption kind {kind!r}")

    return RawTable(header=table.header, rows=tuple(tuple(r) for r in rows)), report
