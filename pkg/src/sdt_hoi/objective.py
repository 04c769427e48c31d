"""Distance-aware weighting and focal binary cross-entropy over verb scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import Tensor


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    normalization: str = "positives"  # or "none"
    da_enabled: bool = True

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 <= self.focal_balance <= 1.0:
            raise ValueError("focal_balance must lie in [0, 1]")
        if self.normalization not in ("positives", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def da_weight(D, alpha, beta) -> Tensor:
    """Per-pair weight ``sigmoid(alpha * D + beta)``."""
    return nn.sigmoid(nn.as_tensor(alpha) * np.asarray(D, dtype=np.float64) + beta)


def _check_targets(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("targets must be 0 or 1")
    return y


def _focal(log_p, log_q, p, q, y: np.ndarray, config: LossConfig) -> Tensor:
    """Elementwise focal terms given ``log p``, ``log(1-p)``, ``p`` and ``1-p``."""
    a, gamma = config.focal_balance, config.focal_gamma
    pos = nn.power(q, gamma) * log_p * (-a)
    negt = nn.power(p, gamma) * log_q * (-(1.0 - a))
    return pos * y + negt * (1.0 - y)


def focal_terms(delta, y, config: LossConfig) -> Tensor:
    delta = nn.as_tensor(delta)
    y = _check_targets(y)
    q = 1.0 - delta
    return _focal(nn.log(delta), nn.log(q), delta, q, y, config)


def focal_terms_from_logits(x, y, config: LossConfig) -> Tensor:
    """Same as :func:`focal_terms` on ``sigmoid(x)``, stable for saturated logits."""
    x = nn.as_tensor(x)
    y = _check_targets(y)
    p = nn.sigmoid(x)
    return _focal(-nn.softplus(-x), -nn.softplus(x), p, 1.0 - p, y, config)


def pair_loss(delta, y, w, config: LossConfig = LossConfig()) -> Tensor:
    """``w * sum_c focal(delta_c, y_c)`` for one pair."""
    return nn.reduce_sum(focal_terms(delta, y, config)) * w


def weighted_loss(
    terms: Tensor,
    distances,
    valid,
    targets,
    alpha,
    beta,
    config: LossConfig,
) -> Tensor:
    """Sum per-pair focal terms with distance-aware weights and normalize.

    ``terms`` has shape ``(..., P, C)``; ``distances``/``valid`` are ``(..., P)``.
    Padding pairs (``valid`` false) contribute nothing.
    """
    valid = np.asarray(valid, dtype=np.float64)
    per_pair = nn.reduce_sum(terms, axis=-1) * valid
    if config.da_enabled:
        per_pair = per_pair * da_weight(distances, alpha, beta)
    total = nn.reduce_sum(per_pair)
    if config.normalization == "positives":
        positives = float(np.sum((np.asarray(targets).max(axis=-1) > 0) * valid))
        total = total / max(1.0, positives)
    return total


def batch_loss(pairs: Sequence, targets, alpha, beta, config: LossConfig = LossConfig()) -> Tensor:
    """Loss over a list of scored pairs (objects with ``verb_scores`` and ``pair_distance``).

    ``targets`` is a ``(len(pairs), C)`` binary array built by box matching.
    """
    if not pairs:
        return Tensor(0.0)
    targets = _check_targets(np.atleast_2d(targets))
    rows = [nn.reshape(nn.as_tensor(p.verb_scores), (1, -1)) for p in pairs]
    delta = nn.concat(rows, axis=0)
    terms = focal_terms(delta, targets, config)
    dist = np.array([p.pair_distance for p in pairs], dtype=np.float64)
    return weighted_loss(terms, dist, np.ones(len(pairs)), targets, alpha, beta, config)
