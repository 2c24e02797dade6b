import numpy as np
import pytest

from chunkshap.data import Dataset
from chunkshap.errors import UsageError
from chunkshap.model import (
    Architecture,
    Checkpoint,
    MetricSpec,
    batch_loss,
    evaluate_metric,
    init_params,
    load_checkpoint,
    loss_gradient,
    predict_proba,
    save_checkpoint,
    sgd_step,
    train,
)

from conftest import make_blobs, make_regression


def flatten(ckpt_like):
    parts = []
    for w, b in zip(ckpt_like.weights, ckpt_like.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def perturbed(w: Checkpoint, flat_index: int, delta: float) -> Checkpoint:
    """Checkpoint with one flattened parameter nudged by delta."""
    flat = flatten(w).copy()
    flat[flat_index] += delta
    weights, biases, pos = [], [], 0
    for wi, bi in zip(w.weights, w.biases):
        weights.append(flat[pos : pos + wi.size].reshape(wi.shape))
        pos += wi.size
        biases.append(flat[pos : pos + bi.size])
        pos += bi.size
    return Checkpoint(tuple(weights), tuple(biases), w.arch, w.step_count, w.seed)


def fd_gradient(w: Checkpoint, x, y, step=1e-5):
    """Central finite differences of the mean batch loss, one coordinate at a time."""
    flat = flatten(w)
    out = np.empty_like(flat)
    for i in range(len(flat)):
        lo = batch_loss(perturbed(w, i, -step), x, y)
        hi = batch_loss(perturbed(w, i, +step), x, y)
        out[i] = (hi - lo) / (2 * step)
    return out


def random_instance(rng):
    f = int(rng.integers(2, 5))
    h1, h2 = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    task = "classification" if rng.random() < 0.5 else "regression"
    out = int(rng.integers(2, 4)) if task == "classification" else 1
    arch = Architecture(input_dim=f, hidden_dims=(h1, h2), output_dim=out, task=task)
    w = init_params(arch, int(rng.integers(1 << 30)))
    # Zero biases leave rectifier pre-activations exactly at the kink for
    # dead rows; randomize them so the loss is smooth where we probe it.
    w = Checkpoint(
        weights=w.weights,
        biases=tuple(rng.normal(0, 0.3, b.shape) for b in w.biases),
        arch=arch,
    )
    b = int(rng.integers(1, 6))
    x = rng.normal(0, 1, (b, f))
    y = rng.integers(0, out, b) if task == "classification" else rng.normal(0, 1, b)
    return w, x, y


def kink_margin(w: Checkpoint, x) -> float:
    """Smallest |pre-activation| at the hidden rectifiers."""
    z1 = x @ w.weights[0] + w.biases[0]
    z2 = np.maximum(z1, 0) @ w.weights[1] + w.biases[1]
    return min(np.abs(z1).min(), np.abs(z2).min())


def random_smooth_instance(rng, margin=1e-3):
    """Instance whose loss is differentiable in a finite-difference neighborhood."""
    while True:
        w, x, y = random_instance(rng)
        if kink_margin(w, x) > margin:
            return w, x, y


def one_d_linear() -> Checkpoint:
    """All-ones weights, zero biases: the network computes w1*w2*w3*x for x>0."""
    arch = Architecture(input_dim=1, hidden_dims=(1, 1), output_dim=1, task="regression")
    ones = (np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    zeros = (np.zeros(1), np.zeros(1), np.zeros(1))
    return Checkpoint(weights=ones, biases=zeros, arch=arch)


class TestInit:
    def test_deterministic_per_seed(self):
        arch = Architecture(3, (4, 3), 2)
        a, b = init_params(arch, 42), init_params(arch, 42)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases))

    def test_shapes(self):
        w = init_params(Architecture(2, (4, 3), 2), 0)
        assert [m.shape for m in w.weights] == [(2, 4), (4, 3), (3, 2)]
        assert [b.shape for b in w.biases] == [(4,), (3,), (2,)]
        assert all(np.all(b == 0) for b in w.biases)

    def test_seeds_differ(self):
        arch = Architecture(2, (4, 3), 2)
        a, b = init_params(arch, 1), init_params(arch, 2)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_fan_in_scale(self):
        w = init_params(Architecture(16, (4, 8), 2), 3)
        assert np.abs(w.weights[0]).max() <= 1 / np.sqrt(16)
        assert np.abs(w.weights[1]).max() <= 1 / np.sqrt(4)

    def test_zero_layer_rejected(self):
        with pytest.raises(UsageError):
            Architecture(0, (4, 3), 2)
        with pytest.raises(UsageError):
            Architecture(2, (4, 0), 2)


class TestGradient:
    def test_one_d_linear_hand_value(self):
        # loss = 0.5*(w*x - y)^2 with w=1, x=2, y=0  ->  d loss / d w1 = 4
        w = one_d_linear()
        g = loss_gradient(w, np.array([[2.0]]), np.array([0.0]))
        assert g.weights[0][0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_zero_at_exact_fit(self):
        w = one_d_linear()
        g = loss_gradient(w, np.array([[2.0]]), np.array([2.0]))
        assert all(np.allclose(m, 0) for m in g.weights)
        assert all(np.allclose(b, 0) for b in g.biases)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(123)
        for _ in range(8):
            w, x, y = random_smooth_instance(rng)
            analytic = flatten(loss_gradient(w, x, y))
            numeric = fd_gradient(w, x, y)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            rel = np.abs(analytic - numeric) / denom
            assert rel.max() <= 1e-4

    def test_empty_batch_rejected(self):
        w = one_d_linear()
        with pytest.raises(UsageError):
            loss_gradient(w, np.empty((0, 1)), np.empty(0))

    def test_shape_mismatch_rejected(self):
        w = one_d_linear()
        with pytest.raises(UsageError):
            loss_gradient(w, np.ones((2, 3)), np.zeros(2))


class TestSgdStep:
    def test_zero_eta_only_counts_step(self):
        w = one_d_linear()
        w2 = sgd_step(w, np.array([[2.0]]), np.array([0.0]), eta=0.0)
        assert w2.step_count == 1
        assert np.array_equal(w2.weights[0], w.weights[0])

    def test_zero_gradient_batch_is_noop(self):
        w = one_d_linear()
        w2 = sgd_step(w, np.array([[2.0]]), np.array([2.0]), eta=0.5)
        assert all(np.array_equal(a, b) for a, b in zip(w.weights, w2.weights))

    def test_hand_computed_update(self):
        w = sgd_step(one_d_linear(), np.array([[2.0]]), np.array([0.0]), eta=0.001)
        assert w.weights[0][0, 0] == pytest.approx(0.996, abs=1e-12)

    def test_sums_gradients_over_batch(self):
        # Two identical rows must move the weights twice as far as one.
        x1, y1 = np.array([[2.0]]), np.array([0.0])
        x2, y2 = np.array([[2.0], [2.0]]), np.array([0.0, 0.0])
        w1 = sgd_step(one_d_linear(), x1, y1, eta=1e-6)
        w2 = sgd_step(one_d_linear(), x2, y2, eta=1e-6)
        d1 = 1.0 - w1.weights[0][0, 0]
        d2 = 1.0 - w2.weights[0][0, 0]
        assert d2 == pytest.approx(2 * d1, rel=1e-12)

    def test_small_step_decreases_batch_loss(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            w, x, y = random_instance(rng)
            before = batch_loss(w, x, y)
            grad_norm = np.linalg.norm(flatten(loss_gradient(w, x, y)))
            if grad_norm < 1e-8:
                continue
            after = batch_loss(sgd_step(w, x, y, eta=1e-6), x, y)
            assert after < before


class TestTrain:
    def test_separable_blobs_reach_high_accuracy(self):
        ds = make_blobs(200, separation=4.0, noise=0.6, seed=5)
        arch = Architecture.for_dataset(ds, hidden_dims=(16, 8))
        w = train(ds, arch, epochs=20, eta=0.005, batch_size=16, seed=1)
        acc = evaluate_metric(w, ds, MetricSpec("accuracy"))
        assert acc >= 0.95

    def test_single_full_batch_epoch_is_one_step(self):
        ds = make_blobs(30, seed=2)
        arch = Architecture.for_dataset(ds, hidden_dims=(4, 4))
        w = train(ds, arch, epochs=1, batch_size=ds.n, seed=0)
        assert w.step_count == 1

    def test_deterministic_per_seed(self):
        ds = make_blobs(60, seed=3)
        arch = Architecture.for_dataset(ds, hidden_dims=(8, 4))
        a = train(ds, arch, epochs=3, seed=11)
        b = train(ds, arch, epochs=3, seed=11)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


class TestMetrics:
    def test_perfect_classifier_scores_one(self):
        ds = make_blobs(10, separation=8.0, noise=0.2, seed=4)
        arch = Architecture.for_dataset(ds, hidden_dims=(8, 4))
        w = train(ds, arch, epochs=60, eta=0.01, seed=2)
        assert evaluate_metric(w, ds, MetricSpec("accuracy")) == 1.0

    def test_exact_regression_scores_zero(self):
        # Zero weights predict 0; targets 0 give rmse 0.
        arch = Architecture(2, (3, 3), 1, task="regression")
        w = init_params(arch, 0)
        zeroed = Checkpoint(
            weights=tuple(np.zeros_like(m) for m in w.weights),
            biases=w.biases, arch=arch,
        )
        ds = Dataset(features=np.ones((5, 2)), targets=np.zeros(5), task="regression")
        assert evaluate_metric(zeroed, ds, MetricSpec("rmse")) == 0.0

    def test_constant_zero_predictor_rmse(self):
        arch = Architecture(1, (2, 2), 1, task="regression")
        w = init_params(arch, 0)
        zeroed = Checkpoint(
            weights=tuple(np.zeros_like(m) for m in w.weights),
            biases=w.biases, arch=arch,
        )
        ds = Dataset(features=np.ones((2, 1)), targets=np.array([3.0, -3.0]), task="regression")
        assert evaluate_metric(zeroed, ds, MetricSpec("rmse")) == pytest.approx(-3.0, abs=1e-12)

    def test_orientation_flips_rmse_ordering(self):
        m = MetricSpec("rmse")
        assert m.oriented(1.0) > m.oriented(2.0)
        assert m.raw(m.oriented(1.7)) == 1.7

    def test_task_mismatch_rejected(self):
        ds = make_blobs(10)
        arch = Architecture.for_dataset(ds)
        w = init_params(arch, 0)
        with pytest.raises(UsageError):
            evaluate_metric(w, ds, MetricSpec("rmse"))

    def test_softmax_rows_form_simplex(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            w, x, y = random_instance(rng)
            if w.arch.task != "classification":
                continue
            p = predict_proba(w, x)
            assert np.all(p >= 0)
            assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestCheckpointIO:
    def test_round_trip(self, tmp_path):
        ds = make_blobs(40, seed=9)
        arch = Architecture.for_dataset(ds, hidden_dims=(6, 5))
        w = train(ds, arch, epochs=2, seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(w, path)
        back = load_checkpoint(path)
        assert back.arch == w.arch
        assert back.step_count == w.step_count
        assert all(np.array_equal(a, b) for a, b in zip(back.weights, w.weights))
        assert all(np.array_equal(a, b) for a, b in zip(back.biases, w.biases))
