"""Dense numeric helpers, loss primitives and seeded random streams.

Vectors and matrices are plain float64 numpy arrays; the helpers here only
validate and compute. Every log is natural and every probability is floored
at ``PROB_FLOOR`` before it is logged.
"""
from __future__ import annotations

import zlib

import numpy as np

from .errors import NumericDomainError, ParameterError, ShapeError

PROB_FLOOR = 1e-12


def as_vector(values) -> np.ndarray:
    """Coerce ``values`` to a finite, non-empty 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if v.size == 0:
        raise ShapeError("vector must be non-empty")
    if not np.all(np.isfinite(v)):
        raise NumericDomainError("vector has non-finite entries")
    return v


def as_matrix(values) -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericDomainError("matrix has non-finite entries")
    return m


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis.

    Accepts a single logit vector or a batch (rows are examples).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("empty logits")
    if not np.all(np.isfinite(z)):
        raise NumericDomainError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    p = as_vector(probs)
    if not 0 <= label < p.size:
        raise IndexError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def kl_divergence(p, q) -> float:
    """KL(p || q) with both arguments floored at ``PROB_FLOOR``."""
    p = as_vector(p)
    q = as_vector(q)
    _same_length(p, q)
    pf = np.maximum(p, PROB_FLOOR)
    qf = np.maximum(q, PROB_FLOOR)
    return float(np.sum(p * (np.log(pf) - np.log(qf))))


def l1_distance(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    _same_length(a, b)
    return float(np.abs(a - b).sum())


def l2_norm(v) -> float:
    return float(np.linalg.norm(as_vector(v)))


def sgd_step(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError(f"params {params.shape} vs grad {grad.shape}")
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    return params - lr * grad


def stream_id(client: int, purpose: str) -> int:
    """Stable 64-bit stream id for one (client, purpose) pair."""
    return (int(client) << 32) | zlib.crc32(purpose.encode("utf-8"))


class RandomSource:
    """Seeded random stream keyed by ``(seed, stream_id)``.

    Streams with distinct ids are statistically independent, and the draws
    of one stream never depend on how other streams were consumed, so client
    iteration order cannot change results.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def for_client(cls, seed: int, client: int, purpose: str) -> "RandomSource":
        return cls(seed, stream_id(client, purpose))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, sigma: float, size) -> np.ndarray:
        return self._gen.normal(0.0, sigma, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices drawn uniformly from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, size=None):
        return self._gen.random(size)


def gaussian_sample(rng: RandomSource, sigma: float, n: int) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros(n)
    return rng.normal(sigma, n)
