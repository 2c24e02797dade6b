"""Measurement harness: removal-retrain curves, LOF outlier scoring, detection recall, speedup."""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .corruption import CorruptionReport
from .data import ChunkPartition, Dataset
from .errors import UsageError
from .model import Architecture, MetricSpec, evaluate_metric, train
from .seeding import child_seed
from .valuation import rank_units


@dataclass(frozen=True)
class RemovalCurve:
    lambdas: tuple[float, ...]
    mean_scores: np.ndarray
    std_scores: np.ndarray
    repeats: int

    def __post_init__(self):
        if not (len(self.lambdas) == len(self.mean_scores) == len(self.std_scores)):
            raise UsageError("curve columns must have equal length")
        if self.repeats < 1:
            raise UsageError("repeats must be >= 1")


@dataclass(frozen=True)
class SpeedupReport:
    t_baseline: float
    t_candidate: float
    speedup: float
    machine: str = ""

    def __post_init__(self):
        if self.t_baseline <= 0 or self.t_candidate <= 0:
            raise UsageError("timings must be positive")


def machine_fingerprint() -> str:
    import os

    return (
        f"{platform.platform()} | python {platform.python_version()} | "
        f"{platform.machine()} x{os.cpu_count()}"
    )


def removed_rows(
    values: np.ndarray,
    lam: float,
    n_rows: int,
    partition: ChunkPartition | None = None,
) -> np.ndarray:
    """Rows covered by the bottom-lambda units (chunks when values are per-chunk)."""
    values = np.asarray(values)
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must be in [0, 1], got {lam}")
    order = rank_units(values)
    if partition is not None and len(values) == partition.num_chunks:
        drop = order[: int(lam * partition.num_chunks)]
        if len(drop) == 0:
            return np.array([], dtype=np.int64)
        return np.sort(np.concatenate([partition.chunks[j] for j in drop]))
    if len(values) == n_rows:
        return np.sort(order[: int(lam * n_rows)])
    raise UsageError(
        f"{len(values)} values match neither the chunk count nor the row count {n_rows}"
    )


def removal_curve(
    ds_train: Dataset,
    ds_val: Dataset,
    partition: ChunkPartition | None,
    values: np.ndarray,
    lambdas: Sequence[float],
    arch: Architecture,
    metric: MetricSpec,
    repeats: int = 5,
    seed: int = 0,
    epochs: int = 20,
    eta: float = 0.001,
    batch_size: int = 32,
) -> RemovalCurve:
    """Drop the lowest-valued units, retrain ``repeats`` models, record mean and std.

    The same derived retraining seeds are reused across lambda points, so the
    lambda=0 column reproduces the plain full-data training exactly.
    """
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    means, stds = [], []
    for lam in lambdas:
        dropped = removed_rows(values, lam, ds_train.n, partition)
        keep = np.setdiff1d(np.arange(ds_train.n), dropped)
        if len(keep) == 0:
            raise UsageError(f"lambda={lam} removes every training row")
        subset = ds_train.take(keep)
        scores = []
        for r in range(repeats):
            w = train(subset, arch, epochs=epochs, eta=eta, batch_size=batch_size,
                      seed=child_seed(seed, r))
            scores.append(evaluate_metric(w, ds_val, metric))
        scores = np.asarray(scores)
        means.append(scores.mean())
        stds.append(scores.std())
    return RemovalCurve(
        lambdas=tuple(float(l) for l in lambdas),
        mean_scores=np.asarray(means),
        std_scores=np.asarray(stds),
        repeats=repeats,
    )


def lof_scores(ds: Dataset | np.ndarray, k_neighbors: int) -> np.ndarray:
    """Classic local outlier factor with Euclidean distances, computed exactly.

    The k-neighborhood contains every point within the k-distance (distance
    ties included). Points inside exact-duplicate clusters larger than k have
    zero reachability density on both sides of the ratio; their LOF is 1 by
    convention.
    """
    x = ds.features if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k_neighbors < n:
        raise UsageError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")

    dist = cdist(x, x)
    np.fill_diagonal(dist, np.inf)
    kdist = np.partition(dist, k_neighbors - 1, axis=1)[:, k_neighbors - 1]
    neighborhoods = [np.flatnonzero(dist[i] <= kdist[i]) for i in range(n)]

    lrd = np.empty(n)
    for i, nbrs in enumerate(neighborhoods):
        reach = np.maximum(kdist[nbrs], dist[i, nbrs])
        mean_reach = reach.mean()
        lrd[i] = np.inf if mean_reach == 0.0 else 1.0 / mean_reach

    lof = np.empty(n)
    for i, nbrs in enumerate(neighborhoods):
        if np.isinf(lrd[i]):
            lof[i] = 1.0  # duplicate-cluster convention
        else:
            lof[i] = lrd[nbrs].mean() / lrd[i]
    return lof


def lof_average_after_removal(
    ds: Dataset,
    values: np.ndarray,
    lam: float,
    k_neighbors: int,
    partition: ChunkPartition | None = None,
) -> float:
    """Mean absolute LOF of the rows retained after bottom-lambda removal (lower is better)."""
    dropped = removed_rows(values, lam, ds.n, partition)
    keep = np.setdiff1d(np.arange(ds.n), dropped)
    if len(keep) <= k_neighbors:
        raise UsageError(f"lambda={lam} leaves too few rows for k={k_neighbors} neighbors")
    return float(np.abs(lof_scores(ds.features[keep], k_neighbors)).mean())


def detection_recall(
    values: np.ndarray,
    report: CorruptionReport,
    partition: ChunkPartition | None,
    lam: float,
    n_rows: int | None = None,
) -> float:
    """Fraction of corrupted rows contained in the removed bottom-lambda set."""
    mask = report.affected_rows
    if len(mask) == 0:
        raise UsageError("corruption report has an empty mask")
    if n_rows is None:
        if partition is None:
            raise UsageError("need a partition or a row count to resolve the removal set")
        n_rows = max(int(c.max()) for c in partition.chunks) + 1
    dropped = removed_rows(values, lam, n_rows, partition)
    hit = np.intersect1d(dropped, mask)
    return float(len(hit) / len(mask))


def measure_speedup(
    run_baseline: Callable[[], object],
    run_candidate: Callable[[], object],
    warmup: bool = True,
) -> SpeedupReport:
    """Wall-clock both runners sequentially; one warm-up run each is excluded."""
    if warmup:
        run_baseline()
        run_candidate()
    t0 = time.perf_counter()
    run_baseline()
    t_baseline = max(time.perf_counter() - t0, 1e-9)
    t0 = time.perf_counter()
    run_candidate()
    t_candidate = max(time.perf_counter() - t0, 1e-9)
    return SpeedupReport(
        t_baseline=t_baseline,
        t_candidate=t_candidate,
        speedup=t_baseline / t_candidate,
        machine=machine_fingerprint(),
    )
