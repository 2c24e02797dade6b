"""Chunk-level Shapley valuation with gated subset pools and single-step SGD checkpoints.

Each outer iteration draws a fresh gated pool of chunk subsets, walks the
chunks once while advancing a model checkpoint, and scores every chunk by its
weighted marginal effect on the validation metric. Per-chunk values are the
running mean across iterations; iteration stops when those means stabilize.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ChunkPartition, Dataset
from .errors import NumericalError, UsageError
from .model import Architecture, Checkpoint, MetricSpec, evaluate_metric, init_params, sgd_step
from .seeding import child_rng, child_seed

# Stream tags for derived RNGs.
_DRAW, _GATE, _ITER_INIT = 0, 1, 2

RANGE_FLOOR = 1e-12


@dataclass(frozen=True)
class CdashConfig:
    """Engine knobs; defaults follow the standard operating point."""

    chunk_size: int = 250
    subset_count: int = 50
    subset_chunks: int | None = None  # default max(2, ceil(c/10)), resolved per partition
    threshold: float = 0.5  # raw metric units: accuracy floor, or rmse ceiling
    eta: float = 0.001
    constant: float = 1.0
    eps: float = 1e-3
    max_iters: int = 50
    max_resample: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.subset_count < 4:
            raise UsageError("subset_count must be >= 4 so the 25% cap is at least 1")
        if self.eta <= 0:
            raise UsageError("eta must be > 0")
        if self.constant <= 0:
            raise UsageError("constant must be > 0")
        if self.eps < 0:
            raise UsageError("eps must be >= 0")
        if self.max_iters < 1:
            raise UsageError("max_iters must be >= 1")
        if self.max_resample < 1:
            raise UsageError("max_resample must be >= 1")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")

    @property
    def membership_cap(self) -> int:
        return int(0.25 * self.subset_count)

    def resolve_subset_chunks(self, num_chunks: int) -> int:
        s = self.subset_chunks
        if s is None:
            s = max(2, math.ceil(num_chunks / 10))
        if not 1 <= s <= num_chunks - 1:
            raise UsageError(
                f"subset_chunks must be in [1, {num_chunks - 1}] for {num_chunks} chunks, got {s}"
            )
        return s


@dataclass(frozen=True)
class SubsetPool:
    """Gated chunk subsets used for one valuation iteration."""

    subsets: tuple[tuple[int, ...], ...]
    membership_count: np.ndarray
    threshold: float
    cap: int
    attempts_log: tuple[int, ...]
    gate_scores: tuple[float, ...]
    threshold_violations: tuple[bool, ...]

    def excluding(self, chunk: int) -> list[int]:
        """Indices of pool subsets not containing ``chunk`` (all of them if none qualify)."""
        out = [i for i, sub in enumerate(self.subsets) if chunk not in sub]
        return out if out else list(range(len(self.subsets)))


@dataclass(frozen=True)
class ValuationResult:
    values: np.ndarray
    iterations_run: int
    history: tuple[np.ndarray, ...]
    converged: bool
    wall_time: float
    pools: tuple[SubsetPool, ...] = ()

    def __post_init__(self):
        if len(self.history) != self.iterations_run:
            raise UsageError("history length must equal iterations_run")


def running_mean_stable(history: Sequence[np.ndarray], eps: float) -> bool:
    """True when no chunk's running mean moved more than eps * value range."""
    if len(history) < 2:
        return False
    arr = np.asarray(history)
    current = arr.mean(axis=0)
    previous = arr[:-1].mean(axis=0)
    change = np.abs(current - previous).max()
    spread = max(float(current.max() - current.min()), RANGE_FLOOR)
    return bool(change <= eps * spread)


def truncation_met(history: Sequence[np.ndarray], eps: float, max_iters: int) -> bool:
    """Stop when the iteration cap is hit or running means have stabilized."""
    if len(history) >= max_iters:
        return True
    return running_mean_stable(history, eps)


def _subset_rows(partition: ChunkPartition, subset: Sequence[int]) -> np.ndarray:
    return np.concatenate([partition.chunks[j] for j in subset])


def _gate_score(
    ds_train: Dataset,
    ds_val: Dataset,
    partition: ChunkPartition,
    subset: Sequence[int],
    arch: Architecture,
    metric: MetricSpec,
    eta: float,
    seed: int,
) -> float:
    """Oriented validation score of a fresh one-step model trained on the subset."""
    rows = _subset_rows(partition, subset)
    w = init_params(arch, seed)
    w = sgd_step(w, ds_train.features[rows], ds_train.targets[rows], eta)
    return evaluate_metric(w, ds_val, metric)


def _completable(counts: np.ndarray, cap: int, slots_left: int, subset_size: int) -> bool:
    """Can ``slots_left`` more subsets be filled without breaching the cap?

    Each remaining slot needs ``subset_size`` distinct chunks, and a chunk can
    serve a slot at most once, so a chunk contributes at most
    min(cap - count, slots_left) further memberships.
    """
    remaining = np.minimum(cap - counts, slots_left)
    return int(remaining.sum()) >= slots_left * subset_size


def _draw_candidate(
    rng: np.random.Generator,
    counts: np.ndarray,
    cap: int,
    slots_left: int,
    subset_size: int,
    max_tries: int,
) -> tuple[int, ...]:
    """One cap-safe candidate subset that leaves the pool completable.

    Uniform rejection sampling first; if that keeps failing (tight pools),
    fall back to the s chunks with the most remaining capacity, which always
    preserves completability.
    """
    c = len(counts)
    for _ in range(max_tries):
        candidate = np.sort(rng.choice(c, size=subset_size, replace=False))
        if np.any(counts[candidate] >= cap):
            continue
        trial = counts.copy()
        trial[candidate] += 1
        if _completable(trial, cap, slots_left - 1, subset_size):
            return tuple(int(j) for j in candidate)
    tiebreak = rng.permutation(c)
    order = tiebreak[np.argsort(-(cap - counts)[tiebreak], kind="stable")]
    candidate = np.sort(order[:subset_size])
    return tuple(int(j) for j in candidate)


def select_subsets(
    partition: ChunkPartition,
    ds_train: Dataset,
    ds_val: Dataset,
    arch: Architecture,
    metric: MetricSpec,
    cfg: CdashConfig,
    iteration: int = 0,
) -> SubsetPool:
    """Draw the gated pool of chunk subsets.

    Each of the k slots is filled by rejection sampling: a candidate subset of
    s distinct chunks must keep every chunk's pool membership within the 25%
    cap and must pass the metric threshold when used as a single training
    step from a fresh init. After ``max_resample`` attempts the best-scoring
    cap-respecting candidate is kept and flagged; the cap itself is never
    violated.
    """
    c = partition.num_chunks
    if c < 2:
        raise UsageError("need at least 2 chunks to value")
    k = cfg.subset_count
    s = cfg.resolve_subset_chunks(c)
    cap = cfg.membership_cap
    if k * s > c * cap:
        raise UsageError(
            f"infeasible pool: {k} subsets of {s} chunks need {k * s} memberships "
            f"but {c} chunks allow at most {c * cap} under the 25% cap"
        )
    th_oriented = metric.oriented(cfg.threshold)

    counts = np.zeros(c, dtype=np.int64)
    subsets: list[tuple[int, ...]] = []
    attempts_log, gate_scores, violations = [], [], []
    for slot in range(k):
        best: tuple[float, tuple[int, ...]] | None = None
        chosen: tuple[int, ...] | None = None
        chosen_score = math.nan
        attempts = 0
        for attempt in range(cfg.max_resample):
            attempts = attempt + 1
            rng = child_rng(cfg.seed, _DRAW, iteration, slot, attempt)
            candidate = _draw_candidate(rng, counts, cap, k - slot, s, cfg.max_resample)
            score = _gate_score(
                ds_train, ds_val, partition, candidate, arch, metric, cfg.eta,
                child_seed(cfg.seed, _GATE, iteration, slot, attempt),
            )
            if best is None or score > best[0]:
                best = (score, candidate)
            if score >= th_oriented:
                chosen = candidate
                chosen_score = score
                break
        if chosen is None:
            chosen_score, chosen = best  # threshold unmet; keep best cap-respecting candidate
        subsets.append(chosen)
        counts[list(chosen)] += 1
        attempts_log.append(attempts)
        gate_scores.append(chosen_score)
        violations.append(chosen_score < th_oriented)

    return SubsetPool(
        subsets=tuple(subsets),
        membership_count=counts,
        threshold=cfg.threshold,
        cap=cap,
        attempts_log=tuple(attempts_log),
        gate_scores=tuple(gate_scores),
        threshold_violations=tuple(violations),
    )


def _chunk_marginal(
    w_prev: Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    subset_rows: np.ndarray,
    chunk_rows: np.ndarray,
    ds_val: Dataset,
    metric: MetricSpec,
    eta: float,
    weight: float,
) -> float:
    """Weighted metric gain of appending the chunk's step after the subset's step."""
    w_z = sgd_step(w_prev, x[subset_rows], y[subset_rows], eta)
    m_z = evaluate_metric(w_z, ds_val, metric)
    w_zj = sgd_step(w_z, x[chunk_rows], y[chunk_rows], eta)
    m_zj = evaluate_metric(w_zj, ds_val, metric)
    return weight * (m_zj - m_z)


def pool_iteration_values(
    ds_train: Dataset,
    ds_val: Dataset,
    partition: ChunkPartition,
    arch: Architecture,
    metric: MetricSpec,
    cfg: CdashConfig,
    pool: SubsetPool,
    w0: Checkpoint,
    executor: ThreadPoolExecutor | None = None,
) -> np.ndarray:
    """One valuation sweep over all chunks, given a pool and an initial checkpoint.

    Walks chunks in order: each chunk's marginals branch off the incoming
    checkpoint, then the checkpoint advances by one summed-gradient step over
    the union of that chunk's eligible subsets. Per-subset marginals are pure
    in the incoming checkpoint and may be evaluated concurrently; they are
    reduced in pool order.
    """
    c = partition.num_chunks
    n = ds_train.n
    x, y = ds_train.features, ds_train.targets
    w = w0
    iter_values = np.zeros(c)
    for j in range(c):
        chunk_rows = partition.chunks[j]
        tasks = []
        for idx in pool.excluding(j):
            rows = _subset_rows(partition, pool.subsets[idx])
            weight = cfg.constant / (n * len(rows))
            tasks.append((rows, weight))
        if executor is None:
            contributions = [
                _chunk_marginal(w, x, y, rows, chunk_rows, ds_val, metric, cfg.eta, wt)
                for rows, wt in tasks
            ]
        else:
            w_in = w
            contributions = list(
                executor.map(
                    lambda t: _chunk_marginal(
                        w_in, x, y, t[0], chunk_rows, ds_val, metric, cfg.eta, t[1]
                    ),
                    tasks,
                )
            )
        iter_values[j] = math.fsum(contributions)
        union_rows = np.unique(np.concatenate([rows for rows, _ in tasks]))
        w = sgd_step(w, x[union_rows], y[union_rows], cfg.eta)
    if not np.isfinite(iter_values).all():
        raise NumericalError("non-finite chunk values")
    return iter_values


def cdash_value(
    ds_train: Dataset,
    ds_val: Dataset,
    partition: ChunkPartition,
    arch: Architecture,
    metric: MetricSpec,
    cfg: CdashConfig,
) -> ValuationResult:
    """Value every chunk of ``partition`` against the validation split."""
    c = partition.num_chunks
    if c < 2:
        raise UsageError("need at least 2 chunks to value")
    cfg.resolve_subset_chunks(c)  # fail fast on an infeasible s

    start = time.perf_counter()
    history: list[np.ndarray] = []
    pools: list[SubsetPool] = []
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        while True:
            iteration = len(history)
            pool = select_subsets(partition, ds_train, ds_val, arch, metric, cfg, iteration)
            pools.append(pool)
            w0 = init_params(arch, child_seed(cfg.seed, _ITER_INIT, iteration))
            history.append(
                pool_iteration_values(
                    ds_train, ds_val, partition, arch, metric, cfg, pool, w0, executor
                )
            )
            if truncation_met(history, cfg.eps, cfg.max_iters):
                break
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    values = np.asarray(history).mean(axis=0)
    return ValuationResult(
        values=values,
        iterations_run=len(history),
        history=tuple(history),
        converged=running_mean_stable(history, cfg.eps),
        wall_time=time.perf_counter() - start,
        pools=tuple(pools),
    )


def rank_units(values: np.ndarray) -> np.ndarray:
    """Unit ids sorted by ascending value, ties broken by ascending id."""
    values = np.asarray(values)
    return np.lexsort((np.arange(len(values)), values))


def rank_chunks(result: ValuationResult | np.ndarray) -> np.ndarray:
    values = result.values if isinstance(result, ValuationResult) else result
    return rank_units(values)
