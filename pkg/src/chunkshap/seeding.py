"""Counter-based RNG stream derivation.

Every stochastic component derives its generator from one master seed plus an
integer key path, so results never depend on call order or thread count.
"""

from __future__ import annotations

import numpy as np


def child_sequence(master_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=tuple(key))


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(child_sequence(master_seed, *key))


def child_seed(master_seed: int, *key: int) -> int:
    """Derive a plain integer seed (for APIs that take one)."""
    return int(child_sequence(master_seed, *key).generate_state(1, np.uint64)[0])
