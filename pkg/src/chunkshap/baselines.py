"""Reference valuation methods: exact Shapley, permutation Monte-Carlo variants, chunk averaging."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import ChunkPartition, Dataset
from .errors import UsageError
from .model import Architecture, MetricSpec, evaluate_metric, init_params, sgd_step, train
from .seeding import child_rng, child_seed
from .valuation import running_mean_stable

MAX_EXACT_PLAYERS = 12

_TMC_PERM, _G_INIT, _G_PERM = 0, 1, 2


@dataclass(frozen=True)
class PlayerSet:
    """Players (disjoint row groups) plus a deterministic coalition utility.

    ``utility`` receives a sorted tuple of player indices and returns an
    oriented score; it must be a pure function of its argument.
    """

    units: tuple[np.ndarray, ...]
    utility: Callable[[tuple[int, ...]], float]

    def __post_init__(self):
        units = tuple(np.asarray(u, dtype=np.int64) for u in self.units)
        merged = np.concatenate(units) if units else np.array([], dtype=np.int64)
        if len(np.unique(merged)) != len(merged):
            raise UsageError("players must be disjoint row groups")
        object.__setattr__(self, "units", units)

    @property
    def num_players(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class TupleValuationResult:
    values: np.ndarray
    iterations: int
    converged: bool
    wall_time: float


def exact_shapley(ps: PlayerSet) -> np.ndarray:
    """Brute-force Shapley values over all coalitions (<= 12 players)."""
    p = ps.num_players
    if p < 1:
        raise UsageError("need at least one player")
    if p > MAX_EXACT_PLAYERS:
        raise UsageError(f"exact valuation enumerates 2^p subsets; {p} players exceeds the {MAX_EXACT_PLAYERS}-player cap")

    utilities = np.empty(1 << p)
    for mask in range(1 << p):
        members = tuple(i for i in range(p) if mask >> i & 1)
        utilities[mask] = ps.utility(members)

    # Coalition weight |Z|! (p-|Z|-1)! / p!, in log space.
    log_weights = [
        math.lgamma(z + 1) + math.lgamma(p - z) - math.lgamma(p + 1) for z in range(p)
    ]
    values = np.zeros(p)
    for i in range(p):
        bit = 1 << i
        for mask in range(1 << p):
            if mask & bit:
                continue
            z = bin(mask).count("1")
            values[i] += math.exp(log_weights[z]) * (utilities[mask | bit] - utilities[mask])
    return values


@dataclass(frozen=True)
class TmcConfig:
    """Permutation sampling with within-walk truncation and a stabilizing outer stop."""

    tolerance: float | None = 0.01  # None disables within-walk truncation
    max_permutations: int = 100
    epochs_per_fit: int = 1
    eta: float = 0.001
    stability_eps: float = 1e-3
    budget: int = 10_000_000
    seed: int = 0

    def __post_init__(self):
        if self.max_permutations < 1:
            raise UsageError("max_permutations must be >= 1")
        if self.epochs_per_fit < 1:
            raise UsageError("epochs_per_fit must be >= 1")


def tmc_shapley_players(ps: PlayerSet, cfg: TmcConfig) -> TupleValuationResult:
    """Truncated Monte-Carlo Shapley over an explicit player set."""
    p = ps.num_players
    if p < 1:
        raise UsageError("need at least one player")
    if p * cfg.max_permutations > cfg.budget:
        raise UsageError(
            f"{p} players x {cfg.max_permutations} permutations exceeds the budget of {cfg.budget}"
        )
    start = time.perf_counter()
    all_players = tuple(range(p))
    full_score = ps.utility(all_players)
    empty_score = ps.utility(())

    history: list[np.ndarray] = []
    converged = False
    for t in range(cfg.max_permutations):
        perm = child_rng(cfg.seed, _TMC_PERM, t).permutation(p)
        walk = np.zeros(p)
        prev = empty_score
        for pos, player in enumerate(perm):
            if cfg.tolerance is not None and abs(full_score - prev) <= cfg.tolerance:
                break  # remaining marginals in this walk count as 0
            current = ps.utility(tuple(sorted(perm[: pos + 1].tolist())))
            walk[player] = current - prev
            prev = current
        history.append(walk)
        if running_mean_stable(history, cfg.stability_eps):
            converged = True
            break

    return TupleValuationResult(
        values=np.asarray(history).mean(axis=0),
        iterations=len(history),
        converged=converged,
        wall_time=time.perf_counter() - start,
    )


def mlp_player_set(
    ds_train: Dataset,
    ds_val: Dataset,
    arch: Architecture,
    metric: MetricSpec,
    units: Sequence[np.ndarray] | None = None,
    epochs_per_fit: int = 1,
    eta: float = 0.001,
    seed: int = 0,
) -> PlayerSet:
    """Players backed by retraining the MLP from one fixed init on the coalition's rows."""
    if units is None:
        units = [np.array([i], dtype=np.int64) for i in range(ds_train.n)]
    units = tuple(np.asarray(u, dtype=np.int64) for u in units)
    base = init_params(arch, child_seed(seed, 0))

    def utility(players: tuple[int, ...]) -> float:
        if not players:
            return evaluate_metric(base, ds_val, metric)
        rows = np.concatenate([units[i] for i in players])
        subset = ds_train.take(rows)
        w = train(
            subset,
            arch,
            epochs=epochs_per_fit,
            eta=eta,
            batch_size=subset.n,
            seed=seed,
            init=base,
        )
        return evaluate_metric(w, ds_val, metric)

    return PlayerSet(units=units, utility=utility)


def tmc_shapley(
    ds_train: Dataset,
    ds_val: Dataset,
    arch: Architecture,
    metric: MetricSpec,
    cfg: TmcConfig,
) -> TupleValuationResult:
    """Per-tuple TMC values: retrain on each permutation prefix, score on validation."""
    ps = mlp_player_set(
        ds_train, ds_val, arch, metric,
        epochs_per_fit=cfg.epochs_per_fit, eta=cfg.eta, seed=cfg.seed,
    )
    return tmc_shapley_players(ps, cfg)


@dataclass(frozen=True)
class GShapConfig:
    eta: float = 0.001
    max_permutations: int = 100
    stability_eps: float = 1e-3
    budget: int = 10_000_000
    seed: int = 0

    def __post_init__(self):
        if self.max_permutations < 1:
            raise UsageError("max_permutations must be >= 1")
        if self.eta < 0:
            raise UsageError("eta must be >= 0")


def g_shapley(
    ds_train: Dataset,
    ds_val: Dataset,
    arch: Architecture,
    metric: MetricSpec,
    cfg: GShapConfig,
) -> TupleValuationResult:
    """Gradient-walk values: one SGD step per tuple along random permutations."""
    n = ds_train.n
    if n * cfg.max_permutations > cfg.budget:
        raise UsageError(
            f"{n} tuples x {cfg.max_permutations} permutations exceeds the budget of {cfg.budget}"
        )
    start = time.perf_counter()
    x, y = ds_train.features, ds_train.targets

    history: list[np.ndarray] = []
    converged = False
    for t in range(cfg.max_permutations):
        w = init_params(arch, child_seed(cfg.seed, _G_INIT, t))
        prev = evaluate_metric(w, ds_val, metric)
        perm = child_rng(cfg.seed, _G_PERM, t).permutation(n)
        walk = np.zeros(n)
        for row in perm:
            w = sgd_step(w, x[row : row + 1], y[row : row + 1], cfg.eta)
            current = evaluate_metric(w, ds_val, metric)
            walk[row] = current - prev
            prev = current
        history.append(walk)
        if running_mean_stable(history, cfg.stability_eps):
            converged = True
            break

    return TupleValuationResult(
        values=np.asarray(history).mean(axis=0),
        iterations=len(history),
        converged=converged,
        wall_time=time.perf_counter() - start,
    )


def chunk_average(tuple_values: np.ndarray, partition: ChunkPartition) -> np.ndarray:
    """Per-chunk arithmetic mean of member tuple values."""
    tuple_values = np.asarray(tuple_values, dtype=np.float64)
    needed = max(int(c.max()) for c in partition.chunks) + 1
    if tuple_values.ndim != 1 or len(tuple_values) < needed:
        raise UsageError(
            f"tuple value vector of length {tuple_values.shape} does not cover the partition's rows"
        )
    return np.array([tuple_values[c].mean() for c in partition.chunks])
