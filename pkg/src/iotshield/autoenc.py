"""Fully connected autoencoder scored by reconstruction error.

Layout ``d -> ceil(d/2) -> ceil(d/4) -> ceil(d/2) -> d`` with ReLU on the
hidden layers and an identity output. Trained with plain mini-batch gradient
descent on mean squared reconstruction error, on benign windows only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FEATURE_SCHEMA_VERSION, DataError, SchemaMismatch
from .features import NormStats, normalize_apply, normalize_fit


CALIBRATION_POINTS = 1000


class TooFewSamples(DataError):
    pass


class NonFiniteLoss(DataError):
    pass


@dataclass(frozen=True)
class AETrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-2
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def layer_dims(d: int) -> list[int]:
    return [d, math.ceil(d / 2), math.ceil(d / 4), math.ceil(d / 2), d]


@dataclass
class AEModel:
    weights: list[np.ndarray]  # weights[i] has shape (dims[i], dims[i+1])
    biases: list[np.ndarray]
    norm_stats: NormStats | None = None
    config: AETrainConfig = field(default_factory=AETrainConfig)
    feature_schema_version: int = FEATURE_SCHEMA_VERSION
    # Sorted benign training scores (at most CALIBRATION_POINTS order statistics);
    # the detector reads its global threshold floor from here.
    calibration: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss_history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("one bias vector per weight matrix is required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input width does not match previous layer")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __eq__(self, other):
        if not isinstance(other, AEModel):
            return NotImplemented
        return (self.layer_dims == other.layer_dims and self.norm_stats == other.norm_stats
                and self.config == other.config
                and np.array_equal(self.calibration, other.calibration)
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))

    @classmethod
    def zeros(cls, dims: list[int], **kwargs) -> AEModel:
        return cls([np.zeros((a, b)) for a, b in zip(dims, dims[1:])],
                   [np.zeros(b) for b in dims[1:]], **kwargs)


def init_model(dims: list[int], rng: np.random.Generator) -> AEModel:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AEModel(weights, biases)


def _forward(model: AEModel, x: np.ndarray):
    """Returns the list of layer pre-activations and the list of layer outputs."""
    pre, act = [], [x]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = act[-1] @ w + b
        pre.append(z)
        act.append(z if i == last else np.maximum(z, 0.0))
    return pre, act


def _check(model: AEModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.layer_dims[0]:
        raise SchemaMismatch(f"expected {model.layer_dims[0]} features, got {x.shape[1]}")
    return x


def reconstruct(model: AEModel, x) -> np.ndarray:
    return _forward(model, _check(model, x))[1][-1]


def ae_scores(model: AEModel, x) -> np.ndarray:
    """Per-row mean squared reconstruction error of normalized vectors."""
    x = _check(model, x)
    return np.mean((reconstruct(model, x) - x) ** 2, axis=1)


def ae_score(model: AEModel, x) -> float:
    return float(ae_scores(model, x)[0])


def ae_scores_raw(model: AEModel, raw) -> np.ndarray:
    """Scores for raw feature vectors, normalized with the model's own stats."""
    if model.norm_stats is None:
        raise SchemaMismatch("model carries no normalization stats")
    return ae_scores(model, normalize_apply(raw, model.norm_stats))


def reconstruction_loss(model: AEModel, x) -> float:
    x = _check(model, x)
    return float(np.mean((reconstruct(model, x) - x) ** 2))


def ae_gradient(model: AEModel, batch):
    """Gradients of the batch mean squared error; returns (weight grads, bias grads, loss)."""
    x = _check(model, batch)
    pre, act = _forward(model, x)
    diff = act[-1] - x
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / diff.size
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = act[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    return gw, gb, loss


def ae_train(x, cfg: AETrainConfig = AETrainConfig(), norm_stats: NormStats | None = None) -> AEModel:
    """Train on normalized benign vectors ``x``; ``loss_history[0]`` is the pre-training loss."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n < cfg.batch_size:
        raise TooFewSamples(f"need at least batch_size={cfg.batch_size} vectors, got {n}")
    if not np.isfinite(x).all():
        raise DataError("training vectors must be finite")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(layer_dims(x.shape[1]), rng)
    model.config, model.norm_stats = cfg, norm_stats
    history = [reconstruction_loss(model, x)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            gw, gb, loss = ae_gradient(model, x[order[start:start + cfg.batch_size]])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} in epoch {epoch} at batch offset {start}")
            for w, g in zip(model.weights, gw):
                w -= cfg.learning_rate * g
            for b, g in zip(model.biases, gb):
                b -= cfg.learning_rate * g
        history.append(reconstruction_loss(model, x))
        if not math.isfinite(history[-1]):
            raise NonFiniteLoss(f"epoch {epoch} ended with loss {history[-1]}")
    model.loss_history = history
    model.calibration = calibration_sample(ae_scores(model, x))
    return model


def calibration_sample(scores) -> np.ndarray:
    """Sorted scores, thinned to evenly spaced order statistics when there are many."""
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size <= CALIBRATION_POINTS:
        return scores
    ranks = np.floor((np.arange(CALIBRATION_POINTS) + 0.5) * scores.size / CALIBRATION_POINTS)
    return scores[ranks.astype(np.int64)]


def fit_autoencoder(raw, cfg: AETrainConfig = AETrainConfig()) -> AEModel:
    """Fit normalization on raw benign vectors, then train on the normalized data."""
    stats = normalize_fit(raw)
    return ae_train(normalize_apply(raw, stats), cfg, stats)
