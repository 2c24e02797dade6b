"""Two-hidden-layer MLP: seeded init, backprop gradients, summed-gradient SGD steps, metrics.

A single ``sgd_step`` applies ``w - eta * sum_over_batch(grad)``; the engine
treats one chunk or one subset as one batch, so the summed form keeps the
step magnitude proportional to how much data the update saw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .data import Dataset, Task
from .errors import NumericalError, UsageError
from .seeding import child_rng, child_seed

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, int] = (64, 32)
    output_dim: int = 2
    task: Task = "classification"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if len(self.hidden_dims) != 2:
            raise UsageError("exactly two hidden layers are supported")
        if any(int(d) <= 0 for d in dims):
            raise UsageError(f"all layer dims must be positive, got {dims}")
        if self.task == "regression" and self.output_dim != 1:
            raise UsageError("regression architecture needs output_dim=1")

    @property
    def layer_dims(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.hidden_dims[0], self.hidden_dims[1], self.output_dim)

    @classmethod
    def for_dataset(cls, ds: Dataset, hidden_dims: tuple[int, int] = (64, 32)) -> "Architecture":
        out = ds.num_classes if ds.task == "classification" else 1
        return cls(input_dim=ds.f, hidden_dims=hidden_dims, output_dim=out, task=ds.task)


@dataclass(frozen=True)
class Checkpoint:
    """Immutable parameter snapshot; every update returns a new one."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    arch: Architecture
    step_count: int = 0
    seed: int = 0


@dataclass(frozen=True)
class Gradient:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class MetricSpec:
    """Performance metric plus its orientation (higher oriented score = better)."""

    kind: Literal["accuracy", "rmse"]

    @property
    def higher_is_better(self) -> bool:
        return self.kind == "accuracy"

    def oriented(self, raw: float) -> float:
        return raw if self.higher_is_better else -raw

    def raw(self, oriented: float) -> float:
        return oriented if self.higher_is_better else -oriented

    @classmethod
    def for_task(cls, task: Task) -> "MetricSpec":
        return cls("accuracy" if task == "classification" else "rmse")


def init_params(arch: Architecture, seed: int) -> Checkpoint:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = arch.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Checkpoint(weights=tuple(weights), biases=tuple(biases), arch=arch, seed=seed)


def _forward(w: Checkpoint, x: np.ndarray):
    z1 = x @ w.weights[0] + w.biases[0]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w.weights[1] + w.biases[1]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ w.weights[2] + w.biases[2]
    if not np.isfinite(z3).all():
        raise NumericalError("non-finite activations in forward pass")
    return z1, a1, z2, a2, z3


def predict_proba(w: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities (classification only)."""
    if w.arch.task != "classification":
        raise UsageError("predict_proba is only defined for classification")
    z3 = _forward(w, np.atleast_2d(np.asarray(x, dtype=np.float64)))[-1]
    shifted = z3 - z3.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict(w: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Argmax class index, or the raw regression output."""
    z3 = _forward(w, np.atleast_2d(np.asarray(x, dtype=np.float64)))[-1]
    if w.arch.task == "classification":
        return z3.argmax(axis=1)
    return z3[:, 0]


def _check_batch(w: Checkpoint, x: np.ndarray, y: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise UsageError("batch is empty")
    if x.shape[1] != w.arch.input_dim:
        raise UsageError(f"batch has {x.shape[1]} features, architecture expects {w.arch.input_dim}")
    if y.shape != (x.shape[0],):
        raise UsageError("targets must be one value per batch row")
    return x, y


def batch_loss(w: Checkpoint, x: np.ndarray, y: np.ndarray) -> float:
    """Mean loss: cross-entropy or half squared error."""
    x, y = _check_batch(w, x, y)
    z3 = _forward(w, x)[-1]
    if w.arch.task == "classification":
        shifted = z3 - z3.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted[np.arange(len(y)), y.astype(np.int64)] - log_norm
        log_p = np.maximum(log_p, np.log(PROB_FLOOR))
        loss = float(-log_p.mean())
    else:
        loss = float(0.5 * np.mean((z3[:, 0] - y) ** 2))
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss


def loss_gradient(w: Checkpoint, x: np.ndarray, y: np.ndarray) -> Gradient:
    """Backprop gradient of the mean batch loss, shaped like the checkpoint."""
    x, y = _check_batch(w, x, y)
    b = x.shape[0]
    z1, a1, z2, a2, z3 = _forward(w, x)
    if w.arch.task == "classification":
        shifted = z3 - z3.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        dz3 = p.copy()
        dz3[np.arange(b), y.astype(np.int64)] -= 1.0
        dz3 /= b
    else:
        dz3 = ((z3[:, 0] - y) / b)[:, None]
    dw3 = a2.T @ dz3
    db3 = dz3.sum(axis=0)
    dz2 = (dz3 @ w.weights[2].T) * (z2 > 0)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w.weights[1].T) * (z1 > 0)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    grads = Gradient(weights=(dw1, dw2, dw3), biases=(db1, db2, db3))
    for g in (*grads.weights, *grads.biases):
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient")
    return grads


def sgd_step(w: Checkpoint, x: np.ndarray, y: np.ndarray, eta: float) -> Checkpoint:
    """One update ``w - eta * sum_over_batch(grad)`` (gradient taken at the incoming w)."""
    if eta < 0:
        raise UsageError("learning rate must be >= 0")
    x, y = _check_batch(w, x, y)
    g = loss_gradient(w, x, y)
    scale = eta * x.shape[0]  # mean gradient -> summed gradient
    return Checkpoint(
        weights=tuple(wi - scale * gi for wi, gi in zip(w.weights, g.weights)),
        biases=tuple(bi - scale * gi for bi, gi in zip(w.biases, g.biases)),
        arch=w.arch,
        step_count=w.step_count + 1,
        seed=w.seed,
    )


def train(
    ds: Dataset,
    arch: Architecture,
    epochs: int,
    eta: float = 0.001,
    batch_size: int = 32,
    seed: int = 0,
    init: Checkpoint | None = None,
) -> Checkpoint:
    """Epoch loop of sgd_step over shuffled mini-batches, deterministic per seed."""
    if epochs < 1:
        raise UsageError("epochs must be >= 1")
    if ds.n < 1:
        raise UsageError("training set is empty")
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    w = init if init is not None else init_params(arch, child_seed(seed, 0))
    shuffle = child_rng(seed, 1)
    x_all, y_all = ds.features, ds.targets
    for _ in range(epochs):
        order = shuffle.permutation(ds.n)
        for start in range(0, ds.n, batch_size):
            batch = order[start : start + batch_size]
            w = sgd_step(w, x_all[batch], y_all[batch], eta)
    return w


def evaluate_metric(w: Checkpoint, ds_eval: Dataset, metric: MetricSpec) -> float:
    """Oriented score on an evaluation set (rmse is negated so higher is better)."""
    if ds_eval.n < 1:
        raise UsageError("evaluation set is empty")
    wants = "classification" if metric.kind == "accuracy" else "regression"
    if ds_eval.task != wants or w.arch.task != wants:
        raise UsageError(f"metric {metric.kind!r} does not match task {ds_eval.task!r}")
    preds = predict(w, ds_eval.features)
    if metric.kind == "accuracy":
        raw = float(np.mean(preds == ds_eval.targets))
    else:
        raw = float(np.sqrt(np.mean((preds - ds_eval.targets) ** 2)))
    if not np.isfinite(raw):
        raise NumericalError("non-finite metric")
    return metric.oriented(raw)


def save_checkpoint(w: Checkpoint, path: str | Path) -> None:
    """Flat little-endian float64 parameters plus a JSON shape sidecar."""
    path = Path(path)
    flat = []
    for wi, bi in zip(w.weights, w.biases):
        flat.append(wi.ravel())
        flat.append(bi.ravel())
    np.concatenate(flat).astype("<f8").tofile(path)
    sidecar = {
        "layer_dims": list(w.arch.layer_dims),
        "task": w.arch.task,
        "step_count": w.step_count,
        "seed": int(w.seed),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    dims = sidecar["layer_dims"]
    arch = Architecture(
        input_dim=dims[0],
        hidden_dims=(dims[1], dims[2]),
        output_dim=dims[3],
        task=sidecar["task"],
    )
    flat = np.fromfile(path, dtype="<f8")
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out))
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out])
        pos += fan_out
    if pos != flat.size:
        raise UsageError(f"checkpoint file size does not match sidecar shapes ({flat.size} vs {pos})")
    return Checkpoint(
        weights=tuple(weights),
        biases=tuple(biases),
        arch=arch,
        step_count=sidecar["step_count"],
        seed=sidecar["seed"],
    )
