"""Linear softmax classifiers and the proxy/private distillation objectives.

Each client holds two linear models over the same features: a private model
that is trained without noise and never leaves the client, and a proxy model
that is trained with clipped, noised gradients and shared with its group.
Each model is pulled toward the other's predictions with a KL term whose
target side is held constant for the step.

Parameters flatten as the weight matrix in row-major order followed by the
bias; the same layout is used for clipping, dissimilarity and the wire format.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import PROB_FLOOR, RandomSource, softmax


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (num_classes, feature_dim)
    bias: np.ndarray  # (num_classes,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "LinearClassifier":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_flat(self, flat) -> "LinearClassifier":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {flat.shape}")
        k = self.weights.size
        return LinearClassifier(flat[:k].reshape(self.weights.shape).copy(), flat[k:].copy())

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.weights.copy(), self.bias.copy())


@dataclass
class DistillPair:
    """A client's private model, its shareable proxy, and the two KL mixing weights."""

    private: LinearClassifier
    proxy: LinearClassifier
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.private.weights.shape != self.proxy.weights.shape:
            raise ShapeError("private and proxy models must have the same shape")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")


@dataclass
class Minibatch:
    indices: np.ndarray
    features: np.ndarray  # (n, feature_dim)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)


def sample_minibatch(features, labels, ratio: float, rng: RandomSource) -> Minibatch:
    """Draw ``ceil(ratio * n)`` distinct training examples."""
    n = len(labels)
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"sampling ratio must be in (0, 1], got {ratio}")
    size = min(n, math.ceil(ratio * n - 1e-9))
    idx = np.sort(rng.choice(n, size))
    return Minibatch(idx, features[idx], labels[idx])


def _check_input(model: LinearClassifier, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != model feature dim {model.feature_dim}")
    return x


def forward(model: LinearClassifier, x) -> np.ndarray:
    """Class probabilities ``softmax(W x + b)`` for one input or a batch of rows."""
    x = _check_input(model, x)
    return softmax(x @ model.weights.T + model.bias)


def _ce_terms(probs: np.ndarray, labels: np.ndarray):
    n = len(labels)
    p_true = probs[np.arange(n), labels]
    loss = -np.log(np.maximum(p_true, PROB_FLOOR))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    # the floor flattens the loss below PROB_FLOOR
    grad[p_true < PROB_FLOOR] = 0.0
    return loss, grad


def _kl_terms(probs: np.ndarray, target: np.ndarray):
    log_p = np.log(np.maximum(probs, PROB_FLOOR))
    log_q = np.log(np.maximum(target, PROB_FLOOR))
    loss = np.sum(probs * (log_p - log_q), axis=1)
    # dL/dp, then through the softmax Jacobian
    dp = log_p - log_q + (probs >= PROB_FLOOR)
    grad = probs * (dp - np.sum(probs * dp, axis=1, keepdims=True))
    return loss, grad


def distill_terms(model: LinearClassifier, x, labels, kl_weight: float, target=None):
    """Per-example mixed loss and its gradient with respect to the logits.

    The loss is ``(1 - kl_weight) * CE(f(x), y) + kl_weight * KL(f(x) || target)``
    where ``target`` holds the (constant) teacher probabilities.
    """
    x = _check_input(model, np.atleast_2d(x))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} inputs but labels of shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise IndexError("label out of range")
    probs = forward(model, x)
    loss, grad = _ce_terms(probs, labels)
    loss = (1.0 - kl_weight) * loss
    grad = (1.0 - kl_weight) * grad
    if kl_weight > 0.0:
        if target is None:
            raise ParameterError("a KL weight needs target probabilities")
        target = np.asarray(target, dtype=np.float64)
        if target.shape != probs.shape:
            raise ShapeError(f"target {target.shape} vs predictions {probs.shape}")
        kl_loss, kl_grad = _kl_terms(probs, target)
        loss = loss + kl_weight * kl_loss
        grad = grad + kl_weight * kl_grad
    return loss, grad


def per_example_grads(model: LinearClassifier, x, labels, kl_weight: float = 0.0, target=None) -> np.ndarray:
    """One flattened parameter gradient per example, shape ``(n, num_params)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise ShapeError("empty batch")
    _, g_logits = distill_terms(model, x, labels, kl_weight, target)
    g_w = g_logits[:, :, None] * x[:, None, :]
    return np.concatenate([g_w.reshape(len(x), -1), g_logits], axis=1)


def batch_grad(model: LinearClassifier, x, labels, kl_weight: float = 0.0, target=None):
    """Mean loss and mean flattened gradient over a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    loss, g_logits = distill_terms(model, x, labels, kl_weight, target)
    n = len(x)
    g_w = g_logits.T @ x / n
    return float(loss.mean()), np.concatenate([g_w.ravel(), g_logits.mean(axis=0)])


def proxy_loss(pair: DistillPair, batch: Minibatch):
    """Proxy objective on a batch and per-example proxy gradients.

    The private model only supplies constant target probabilities.
    """
    target = forward(pair.private, batch.features) if pair.alpha > 0 else None
    loss, _ = distill_terms(pair.proxy, batch.features, batch.labels, pair.alpha, target)
    grads = per_example_grads(pair.proxy, batch.features, batch.labels, pair.alpha, target)
    return float(loss.mean()), grads


def private_loss(pair: DistillPair, batch: Minibatch):
    """Private objective on a batch and its mean gradient; the proxy is held constant."""
    target = forward(pair.proxy, batch.features) if pair.beta > 0 else None
    return batch_grad(pair.private, batch.features, batch.labels, pair.beta, target)


def predict(model: LinearClassifier, x) -> np.ndarray:
    # np.argmax resolves ties to the lowest class index
    return np.argmax(forward(model, np.atleast_2d(x)), axis=1)


def evaluate(model: LinearClassifier, x, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return float(np.mean(predict(model, x) == labels))
