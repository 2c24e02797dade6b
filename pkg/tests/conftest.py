import numpy as np
import pytest

from chunkshap.data import Dataset


def make_blobs(
    n: int,
    f: int = 3,
    separation: float = 2.0,
    noise: float = 1.0,
    seed: int = 0,
    shuffle: bool = True,
) -> Dataset:
    """Two Gaussian class blobs at +-separation/2 along every feature axis."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.vstack(
        [
            rng.normal(-separation / 2, noise, (half, f)),
            rng.normal(separation / 2, noise, (n - half, f)),
        ]
    )
    y = np.array([0] * half + [1] * (n - half), dtype=np.int64)
    if shuffle:
        order = rng.permutation(n)
        x, y = x[order], y[order]
    return Dataset(features=x, targets=y, task="classification")


def make_regression(n: int, f: int = 3, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Linear targets with Gaussian observation noise."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (n, f))
    coef = rng.normal(0, 1, f)
    y = x @ coef + rng.normal(0, noise, n)
    return Dataset(features=x, targets=y, task="regression")


@pytest.fixture
def blob_dataset():
    return make_blobs(200, seed=7)
