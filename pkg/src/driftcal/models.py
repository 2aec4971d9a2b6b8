"""Classifier stand-in: softmax regression and a seeded Gaussian-blob generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import LabeledDataset, LogitSet, softmax
from .errors import ConfigError, InvalidInputError, ParseError, TrainingError, VersionError

MODEL_FORMAT = "drift-calib-model-v1"
INIT_STDDEV = 0.01


@dataclass(frozen=True)
class BlobConfig:
    num_classes: int
    input_dim: int
    samples_per_class: int
    class_center_scale: float = 1.0
    within_class_stddev: float = 1.0
    seed: int = 0
    # optional (H, W, K) layout of the D features; defaults to (1, 1, D)
    grid_shape: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not self.class_center_scale > 0:
            raise ConfigError("class_center_scale must be > 0")
        if not self.within_class_stddev > 0:
            raise ConfigError("within_class_stddev must be > 0")
        if self.grid_shape is not None and int(np.prod(self.grid_shape)) != self.input_dim:
            raise ConfigError(f"grid_shape {self.grid_shape} does not hold {self.input_dim} features")


def generate_blobs(config: BlobConfig) -> LabeledDataset:
    """Isotropic Gaussian clusters, one per class, rescaled into [0, 1] per feature.

    The output is a deterministic function of ``config``; samples come out
    shuffled (not grouped by class).
    """
    rng = np.random.default_rng(config.seed)
    c, d, n = config.num_classes, config.input_dim, config.samples_per_class
    centers = rng.normal(0.0, config.class_center_scale, size=(c, d))
    x = centers[:, None, :] + rng.normal(0.0, config.within_class_stddev, size=(c, n, d))
    x = x.reshape(c * n, d)
    y = np.repeat(np.arange(c), n)
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    x = np.clip((x - lo) / span, 0.0, 1.0)
    perm = rng.permutation(c * n)
    x, y = x[perm], y[perm]
    shape = config.grid_shape or (1, 1, d)
    return LabeledDataset(x.reshape((c * n,) + tuple(shape)), y, c)


@dataclass(frozen=True, eq=False)
class SoftmaxRegressionModel:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidInputError(f"weights {w.shape} and bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidInputError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Raw ``(N, C)`` logits for an ``(N, D)`` feature matrix."""
        if x.shape[1] != self.input_dim:
            raise InvalidInputError(f"model expects D={self.input_dim}, got {x.shape[1]}")
        return x @ self.weights.T + self.bias


def nll_loss_and_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float = 0.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL plus ``l2 * ||W||^2`` and its gradient w.r.t. ``W`` and ``b``."""
    n = x.shape[0]
    z = x @ weights.T + bias
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), y]) + l2 * np.sum(weights**2))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), y] -= 1.0
    grad_w = p.T @ x / n + 2.0 * l2 * weights
    grad_b = p.mean(axis=0)
    return loss, grad_w, grad_b


def init_model(num_classes: int, input_dim: int, seed: int) -> SoftmaxRegressionModel:
    rng = np.random.default_rng(seed)
    return SoftmaxRegressionModel(
        rng.normal(0.0, INIT_STDDEV, size=(num_classes, input_dim)), np.zeros(num_classes)
    )


def train_softmax_regression(
    train: LabeledDataset,
    epochs: int = 500,
    learning_rate: float = 0.5,
    l2: float = 0.0,
    seed: int = 0,
    callback: Callable[[int, float], None] | None = None,
) -> SoftmaxRegressionModel:
    """Full-batch gradient descent on mean NLL + ``l2 * ||W||^2``.

    ``callback(epoch, loss)`` is called with the loss *before* each update.
    """
    if epochs < 0 or learning_rate < 0 or l2 < 0:
        raise ConfigError("epochs, learning_rate and l2 must be non-negative")
    model = init_model(train.num_classes, train.input_dim, seed)
    w, b = model.weights.copy(), model.bias.copy()
    x, y = train.flat(), train.labels
    # overflow is reported as a TrainingError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            loss, gw, gb = nll_loss_and_grad(w, b, x, y, l2)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch}")
            if callback is not None:
                callback(epoch, loss)
            w -= learning_rate * gw
            b -= learning_rate * gb
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
        raise TrainingError(f"training diverged at epoch {epochs}")
    return SoftmaxRegressionModel(w, b)


def predict_logits(model: SoftmaxRegressionModel, dataset: LabeledDataset) -> LogitSet:
    return LogitSet(model.logits(dataset.flat()), dataset.labels)


def predict_proba(model: SoftmaxRegressionModel, dataset: LabeledDataset) -> np.ndarray:
    return softmax(model.logits(dataset.flat()))


def accuracy(model: SoftmaxRegressionModel, dataset: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit equals the label (ties -> lowest index)."""
    if len(dataset) == 0:
        raise InvalidInputError("accuracy of an empty dataset")
    pred = np.argmax(model.logits(dataset.flat()), axis=1)
    return float(np.mean(pred == dataset.labels))


def save_model(model: SoftmaxRegressionModel, path: str | Path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "C": model.num_classes,
        "D": model.input_dim,
        "W": model.weights.tolist(),
        "b": model.bias.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> SoftmaxRegressionModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise VersionError(f"{path}: expected format {MODEL_FORMAT!r}")
    try:
        w = np.asarray(doc["W"], dtype=np.float64)
        b = np.asarray(doc["b"], dtype=np.float64)
        c, d = int(doc["C"]), int(doc["D"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed model file ({exc})") from None
    if w.shape != (c, d) or b.shape != (c,):
        raise ParseError(f"{path}: parameter shapes do not match C={c}, D={d}")
    return SoftmaxRegressionModel(w, b)
