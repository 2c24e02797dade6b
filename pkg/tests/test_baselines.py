import itertools
import math

import numpy as np
import pytest

from chunkshap.baselines import (
    GShapConfig,
    PlayerSet,
    TmcConfig,
    chunk_average,
    exact_shapley,
    g_shapley,
    mlp_player_set,
    tmc_shapley,
    tmc_shapley_players,
)
from chunkshap.data import Dataset, partition_fixed
from chunkshap.errors import UsageError
from chunkshap.model import Architecture, MetricSpec

from conftest import make_blobs, make_regression


def singleton_players(p):
    return tuple(np.array([i]) for i in range(p))


def permutation_shapley(p, utility):
    """Independent oracle: average marginal over all p! orderings."""
    values = np.zeros(p)
    for order in itertools.permutations(range(p)):
        coalition = []
        prev = utility(())
        for player in order:
            coalition.append(player)
            cur = utility(tuple(sorted(coalition)))
            values[player] += cur - prev
            prev = cur
    return values / math.factorial(p)


def glove_utility(players):
    # Player 0 holds a left glove, players 1 and 2 right gloves.
    return 1.0 if 0 in players and (1 in players or 2 in players) else 0.0


class TestExactShapley:
    def test_glove_game(self):
        ps = PlayerSet(units=singleton_players(3), utility=glove_utility)
        values = exact_shapley(ps)
        oracle = permutation_shapley(3, glove_utility)
        assert np.allclose(values, oracle, atol=1e-12)
        assert np.allclose(values, [2 / 3, 1 / 6, 1 / 6], atol=1e-12)

    def test_null_player(self):
        def utility(players):
            return float(sum(p for p in players if p != 2))

        ps = PlayerSet(units=singleton_players(4), utility=utility)
        values = exact_shapley(ps)
        assert abs(values[2]) <= 1e-12

    def test_efficiency_on_random_games(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            p = int(rng.integers(2, 7))
            table = rng.normal(0, 1, 1 << p)

            def utility(players, table=table):
                mask = sum(1 << i for i in players)
                return float(table[mask])

            values = exact_shapley(PlayerSet(units=singleton_players(p), utility=utility))
            assert values.sum() == pytest.approx(utility(tuple(range(p))) - utility(()), abs=1e-9)

    def test_matches_permutation_oracle_on_random_games(self):
        rng = np.random.default_rng(29)
        for _ in range(5):
            p = int(rng.integers(2, 6))
            table = rng.normal(0, 1, 1 << p)

            def utility(players, table=table):
                return float(table[sum(1 << i for i in players)])

            ps = PlayerSet(units=singleton_players(p), utility=utility)
            assert np.allclose(exact_shapley(ps), permutation_shapley(p, utility), atol=1e-9)

    def test_too_many_players_rejected(self):
        ps = PlayerSet(units=singleton_players(13), utility=lambda s: 0.0)
        with pytest.raises(UsageError, match="12"):
            exact_shapley(ps)

    def test_overlapping_units_rejected(self):
        with pytest.raises(UsageError, match="disjoint"):
            PlayerSet(units=(np.array([0, 1]), np.array([1, 2])), utility=lambda s: 0.0)


class TestTmc:
    def test_infinite_tolerance_truncates_immediately(self):
        ps = PlayerSet(units=singleton_players(5), utility=lambda s: float(len(s)))
        cfg = TmcConfig(tolerance=np.inf, max_permutations=4, stability_eps=0.0, seed=1)
        res = tmc_shapley_players(ps, cfg)
        assert np.array_equal(res.values, np.zeros(5))

    def test_deterministic_per_seed(self):
        ps = PlayerSet(units=singleton_players(5), utility=glove5)
        cfg = TmcConfig(tolerance=None, max_permutations=50, stability_eps=0.0, seed=9)
        a = tmc_shapley_players(ps, cfg)
        b = tmc_shapley_players(ps, cfg)
        assert np.array_equal(a.values, b.values)
        assert a.iterations == b.iterations

    def test_approaches_exact_values(self):
        ps = PlayerSet(units=singleton_players(5), utility=glove5)
        exact = exact_shapley(ps)
        cfg = TmcConfig(tolerance=None, max_permutations=2000, stability_eps=0.0, seed=3)
        approx = tmc_shapley_players(ps, cfg)
        assert np.abs(approx.values - exact).max() <= 0.05

    def test_budget_guard(self):
        ps = PlayerSet(units=singleton_players(5), utility=lambda s: 0.0)
        with pytest.raises(UsageError, match="budget"):
            tmc_shapley_players(ps, TmcConfig(max_permutations=100, budget=10))

    def test_dataset_entry_point_runs(self):
        ds = make_blobs(16, seed=21)
        train, val = ds.take(range(8)), ds.take(range(8, 16))
        arch = Architecture.for_dataset(train, hidden_dims=(4, 4))
        cfg = TmcConfig(tolerance=None, max_permutations=6, stability_eps=0.0, seed=2)
        res = tmc_shapley(train, val, arch, MetricSpec("accuracy"), cfg)
        assert res.values.shape == (8,)
        assert np.isfinite(res.values).all()


def glove5(players):
    # Two left gloves (0, 1) and three right gloves: value = matched pairs.
    lefts = sum(1 for p in players if p < 2)
    rights = len(players) - lefts
    return float(min(lefts, rights))


class TestGShapley:
    def test_zero_eta_gives_zero_values(self):
        ds = make_blobs(12, seed=5)
        train, val = ds.take(range(8)), ds.take(range(8, 12))
        arch = Architecture.for_dataset(train, hidden_dims=(4, 4))
        cfg = GShapConfig(eta=0.0, max_permutations=3, stability_eps=0.0, seed=0)
        res = g_shapley(train, val, arch, MetricSpec("accuracy"), cfg)
        assert np.array_equal(res.values, np.zeros(8))

    def test_deterministic_per_seed(self):
        ds = make_blobs(12, seed=6)
        train, val = ds.take(range(8)), ds.take(range(8, 12))
        arch = Architecture.for_dataset(train, hidden_dims=(4, 4))
        cfg = GShapConfig(eta=0.05, max_permutations=4, stability_eps=0.0, seed=4)
        a = g_shapley(train, val, arch, MetricSpec("accuracy"), cfg)
        b = g_shapley(train, val, arch, MetricSpec("accuracy"), cfg)
        assert np.array_equal(a.values, b.values)

    def test_duplicated_tuples_get_similar_values(self):
        # One badly corrupted tuple widens the value range; every tuple is
        # duplicated, so paired values must agree up to Monte-Carlo noise.
        base = make_regression(6, f=3, noise=0.05, seed=7)
        y = base.targets.copy()
        y[2] += 10.0
        corrupted = Dataset(features=base.features, targets=y, task="regression")
        doubled = corrupted.take(np.repeat(np.arange(6), 2))
        val = make_regression(150, f=3, noise=0.05, seed=8)
        arch = Architecture(3, (8, 4), 1, task="regression")
        cfg = GShapConfig(eta=0.02, max_permutations=1500, stability_eps=0.0, seed=5)
        res = g_shapley(doubled, val, arch, MetricSpec("rmse"), cfg)
        spread = res.values.max() - res.values.min()
        pair_gap = np.abs(res.values[0::2] - res.values[1::2]).max()
        assert pair_gap <= 0.05 * spread

    def test_budget_guard(self):
        ds = make_blobs(10, seed=1)
        arch = Architecture.for_dataset(ds)
        with pytest.raises(UsageError, match="budget"):
            g_shapley(ds, ds, arch, MetricSpec("accuracy"),
                      GShapConfig(max_permutations=100, budget=10))


class TestChunkAverage:
    def test_simple_mean(self):
        ds = make_blobs(4, seed=0)
        part = partition_fixed(ds, 2)
        out = chunk_average(np.array([1.0, 3.0, 5.0, 7.0]), part)
        assert out.tolist() == [2.0, 6.0]

    def test_zero_values(self):
        ds = make_blobs(6, seed=0)
        part = partition_fixed(ds, 3)
        assert chunk_average(np.zeros(6), part).tolist() == [0.0, 0.0]

    def test_matches_independent_means(self):
        rng = np.random.default_rng(13)
        ds = make_blobs(50, seed=2)
        part = partition_fixed(ds, 7)
        values = rng.normal(0, 1, 50)
        got = chunk_average(values, part)
        expected = [np.mean([values[i] for i in chunk]) for chunk in part.chunks]
        assert np.allclose(got, expected, atol=1e-12)

    def test_affine_rescaling_commutes(self):
        rng = np.random.default_rng(14)
        ds = make_blobs(30, seed=3)
        part = partition_fixed(ds, 4)
        values = rng.normal(0, 1, 30)
        a, b = 2.5, -1.25
        assert np.allclose(
            chunk_average(a * values + b, part),
            a * chunk_average(values, part) + b,
            atol=1e-12,
        )

    def test_length_mismatch_rejected(self):
        ds = make_blobs(10, seed=4)
        part = partition_fixed(ds, 5)
        with pytest.raises(UsageError):
            chunk_average(np.zeros(4), part)
