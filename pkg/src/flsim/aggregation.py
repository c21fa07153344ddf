"""Aggregation weights and the weighted pseudo-gradient sum, plus the FedAvg combine."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flsim.errors import ConfigurationError

log = logging.getLogger(__name__)


class WeightStrategy(str, enum.Enum):
    UNIFORM = "uniform"
    SOFTMAX_LOSS = "softmax_loss"
    RL = "rl"
    SAMPLE_SIZE = "sample_size"


@dataclass(frozen=True)
class AggregationWeights:
    weights: np.ndarray
    strategy: WeightStrategy

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ConfigurationError(f"weights must be a non-empty vector, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "strategy", WeightStrategy(self.strategy))

    def __len__(self):
        return self.weights.size

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())


def normalize(raw: np.ndarray) -> np.ndarray:
    """Scale a non-negative vector onto the simplex, nudging the sum to 1 within 1e-12."""
    w = raw / raw.sum()
    # one correction pass absorbs the rounding left by the division
    w = w / w.sum()
    return w


def softmax_weights(losses: Sequence[float], beta: float = 1.0) -> AggregationWeights:
    """exp(-beta*L_j) normalized over slots; non-finite losses get weight 0."""
    losses = np.asarray(losses, dtype=np.float64)
    if not beta >= 0:
        raise ConfigurationError(f"beta must be >= 0, got {beta}")
    finite = np.isfinite(losses)
    if not finite.any():
        raise ConfigurationError("no finite losses to weight")
    if not finite.all():
        log.warning("excluding %d slot(s) with non-finite loss from softmax weighting",
                    int((~finite).sum()))
    scores = np.full(losses.shape, -np.inf)
    scores[finite] = -beta * losses[finite]
    scores -= scores[finite].max()
    raw = np.where(finite, np.exp(scores), 0.0)
    return AggregationWeights(normalize(raw), WeightStrategy.SOFTMAX_LOSS)


def uniform_weights(n: int) -> AggregationWeights:
    if n < 1:
        raise ConfigurationError(f"need at least one slot, got {n}")
    return AggregationWeights(np.full(n, 1.0 / n), WeightStrategy.UNIFORM)


def sample_size_weights(n_samples: Sequence[int]) -> AggregationWeights:
    counts = np.asarray(n_samples, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ConfigurationError("sample counts must be positive")
    return AggregationWeights(normalize(counts), WeightStrategy.SAMPLE_SIZE)


def restrict(weights: AggregationWeights, keep: Sequence[bool]) -> AggregationWeights:
    """Drop slots (e.g. failed clients) and renormalize over the survivors."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != weights.weights.shape:
        raise ConfigurationError("survivor mask does not match the number of weights")
    w = weights.weights[keep]
    if w.size == 0:
        raise ConfigurationError("no surviving slots")
    if w.sum() <= 0:
        w = np.ones_like(w)
    return AggregationWeights(normalize(w), weights.strategy)


def aggregate(pseudo_gradients: Sequence[np.ndarray],
              weights: AggregationWeights) -> np.ndarray:
    """Weighted sum over slots, accumulated in slot order."""
    if len(pseudo_gradients) != len(weights):
        raise ConfigurationError(
            f"{len(pseudo_gradients)} pseudo-gradients but {len(weights)} weights")
    length = {np.shape(g) for g in pseudo_gradients}
    if len(length) != 1:
        raise ConfigurationError(f"pseudo-gradients disagree in shape: {sorted(length)}")
    total = np.zeros(length.pop(), dtype=np.float64)
    for alpha, g in zip(weights.weights, pseudo_gradients):
        total += alpha * np.asarray(g, dtype=np.float64)
    return total


def fedavg_combine(models: Sequence[np.ndarray], n_samples: Sequence[int]) -> np.ndarray:
    """Sample-count-weighted mean of final local models."""
    if len(models) != len(n_samples) or not models:
        raise ConfigurationError(f"{len(models)} models but {len(n_samples)} sample counts")
    shapes = {np.shape(m) for m in models}
    if len(shapes) != 1:
        raise ConfigurationError(f"models disagree in shape: {sorted(shapes)}")
    counts = np.asarray(n_samples, dtype=np.float64)
    if np.any(counts <= 0):
        raise ConfigurationError("sample counts must be positive")
    total = np.zeros(shapes.pop(), dtype=np.float64)
    for share, m in zip(counts / counts.sum(), models):
        total += share * np.asarray(m, dtype=np.float64)
    return total
