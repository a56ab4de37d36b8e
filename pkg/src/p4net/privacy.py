"""Per-example clipping, the Gaussian mechanism for proxy updates, noise
calibration, and round-based privacy budget tracking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExhaustedError, ParameterError, ShapeError
from .numerics import RandomSource, as_vector


@dataclass(frozen=True)
class DpConfig:
    """Privacy target and the training schedule it must cover.

    Attributes:
        epsilon: target epsilon.
        delta: target delta, in (0, 1).
        clip: per-example clipping bound C.
        sample_ratio: fraction s of local data drawn per local step.
        local_steps: local steps K per communication round.
        rounds: total communication rounds covered by the budget.
        c_sigma: constant hidden by the asymptotic noise bound.
    """

    epsilon: float
    delta: float
    clip: float = 1.0
    sample_ratio: float = 1.0
    local_steps: int = 1
    rounds: int = 100
    c_sigma: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must be in (0, 1), got {self.delta}")
        if not self.clip > 0:
            raise ParameterError(f"clip must be positive, got {self.clip}")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ParameterError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if self.local_steps < 1 or self.rounds < 1:
            raise ParameterError("local_steps and rounds must be at least 1")
        if not self.c_sigma > 0:
            raise ParameterError(f"c_sigma must be positive, got {self.c_sigma}")


def calibrate_sigma(cfg: DpConfig) -> float:
    """Noise multiplier for the whole round budget.

    ``c_sigma * s * sqrt(T K ln(2T/delta) ln(2/delta)) / epsilon`` with one
    participating client and one aggregated gradient per release.
    """
    t, k, d = cfg.rounds, cfg.local_steps, cfg.delta
    root = math.sqrt(t * k * math.log(2.0 * t / d) * math.log(2.0 / d))
    return cfg.c_sigma * cfg.sample_ratio * root / cfg.epsilon


def clip_gradient(g, clip: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, clip / ||g||)``."""
    if not clip > 0:
        raise ParameterError(f"clip must be positive, got {clip}")
    g = as_vector(g)
    norm = np.linalg.norm(g)
    if norm <= clip:
        return g.copy()
    return g * (clip / norm)


def clip_rows(grads, clip: float) -> np.ndarray:
    """Row-wise :func:`clip_gradient` for an ``(n, d)`` stack of per-example gradients."""
    if not clip > 0:
        raise ParameterError(f"clip must be positive, got {clip}")
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"expected (n, d) gradients, got {g.shape}")
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    over = norms > clip
    scale = np.ones_like(norms)
    scale[over] = clip / norms[over]
    return g * scale


def privatize(clipped, clip: float, sigma: float, sample_ratio: float, num_samples: int,
              rng: RandomSource) -> np.ndarray:
    """Noisy averaged update from already clipped per-example gradients.

    Returns ``sum(clipped) / (s R) + (2 C / (s R)) * N(0, sigma^2 I)``.

    Args:
        clipped: ``(n, d)`` clipped per-example gradients.
        clip: clipping bound C.
        sigma: noise multiplier.
        sample_ratio: sampling ratio s.
        num_samples: local training set size R.
        rng: the client's noise stream.
    """
    g = np.asarray(clipped, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ParameterError("privatize needs a non-empty (n, d) gradient stack")
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    denom = sample_ratio * num_samples
    if not denom > 0:
        raise ParameterError("s * R must be positive")
    update = g.sum(axis=0) / denom
    if sigma > 0:
        update = update + (2.0 * clip / denom) * rng.normal(sigma, g.shape[1])
    return update


@dataclass
class PrivacyLedger:
    """Counts communication rounds spent against a fixed round budget."""

    rounds_budget: int
    rounds_used: int = 0

    @property
    def exhausted(self) -> bool:
        return self.rounds_used >= self.rounds_budget

    @property
    def remaining(self) -> int:
        return self.rounds_budget - self.rounds_used

    def charge(self) -> "PrivacyLedger":
        if self.exhausted:
            raise BudgetExhaustedError(
                f"privacy budget of {self.rounds_budget} rounds already spent")
        self.rounds_used += 1
        return self


def ledger_charge(ledger: PrivacyLedger) -> PrivacyLedger:
    return ledger.charge()
