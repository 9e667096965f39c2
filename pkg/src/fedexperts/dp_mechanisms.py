"""Differential-privacy primitives: Laplace noise, noisy argmin, AboveThreshold
and exponential sampling.

Every mechanism has a zero-noise mode (scale 0 or ``noise_override=True``) so
that the algorithms built on top of them can be unit-tested deterministically.
"""

from __future__ import annotations

import enum
import math
from typing import Optional

import numpy as np

from fedexperts.core import ParameterError, ShapeError, StateError


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    """Draws one sample from Lap(scale) (density ``exp(-|x|/scale) / 2scale``)."""
    if not (scale > 0 and math.isfinite(scale)):
        raise ParameterError(f"Laplace scale must be positive and finite, got {scale}")
    return float(rng.laplace(0.0, scale))


def laplace_noise(scale: float, size, rng: np.random.Generator) -> np.ndarray:
    """Array of IID Lap(scale) draws; all zeros when ``scale == 0``."""
    if scale == 0:
        return np.zeros(size)
    if not (scale > 0 and math.isfinite(scale)):
        raise ParameterError(f"Laplace scale must be nonnegative and finite, got {scale}")
    return rng.laplace(0.0, scale, size=size)


def noisy_avg_argmin(score_rows, per_row_noise_scale: float,
                     rng: Optional[np.random.Generator] = None) -> int:
    """Report-noisy-min over column means of an ``m x d`` score matrix.

    Each entry gets independent Lap(per_row_noise_scale) noise, columns are
    averaged over rows, and the 1-indexed argmin column is returned. Ties go
    to the lowest index.
    """
    try:
        rows = np.array(score_rows, dtype=float)
    except ValueError as e:
        raise ShapeError(f"ragged score matrix: {e}") from None
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
        raise ShapeError(f"expected a nonempty m x d matrix, got shape {rows.shape}")
    if per_row_noise_scale < 0:
        raise ParameterError("noise scale must be nonnegative")
    if per_row_noise_scale > 0:
        if rng is None:
            raise ParameterError("a random generator is required when noise is on")
        rows = rows + laplace_noise(per_row_noise_scale, rows.shape, rng)
    return int(np.argmin(rows.mean(axis=0))) + 1


class Outcome(enum.Enum):
    BELOW = "below"
    ABOVE = "above"


class AboveThresholdState:
    """Single-owner state of the AboveThreshold (sparse vector) mechanism.

    The noisy threshold is ``L + Lap(4/epsilon)``; each query adds fresh
    ``Lap(8/epsilon)`` noise. The first Above answer halts the mechanism
    until `reset` redraws the threshold.
    """

    def __init__(self, threshold: float, epsilon: float, rng: Optional[np.random.Generator] = None,
                 noise_override: bool = False):
        if not epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {epsilon}")
        self.threshold = float(threshold)
        self.epsilon = float(epsilon)
        self.noise_override = noise_override
        self.halted = False
        self.noisy_threshold = self.threshold
        self.reset(rng)

    def reset(self, rng: Optional[np.random.Generator] = None) -> None:
        if self.noise_override:
            self.noisy_threshold = self.threshold
        else:
            if rng is None:
                raise ParameterError("a random generator is required when noise is on")
            self.noisy_threshold = self.threshold + laplace_sample(4.0 / self.epsilon, rng)
        self.halted = False

    def query(self, q: float, rng: Optional[np.random.Generator] = None) -> Outcome:
        if self.halted:
            raise StateError("AboveThreshold has halted; reset before querying again")
        if self.noise_override:
            gamma = 0.0
        else:
            if rng is None:
                raise ParameterError("a random generator is required when noise is on")
            gamma = laplace_sample(8.0 / self.epsilon, rng)
        if q + gamma <= self.noisy_threshold:
            return Outcome.BELOW
        self.halted = True
        return Outcome.ABOVE


def above_threshold_query(state: AboveThresholdState, q: float,
                          rng: Optional[np.random.Generator] = None) -> Outcome:
    return state.query(q, rng)


def exponential_probabilities(scores, eta: float) -> np.ndarray:
    """Probabilities proportional to ``exp(-eta * score / 2)``."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ParameterError("scores must be a nonempty vector")
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    if not np.all(np.isfinite(s)):
        raise ParameterError("scores must be finite")
    # shift by the minimum so the largest weight is exactly 1
    w = np.exp(-0.5 * eta * (s - s.min()))
    return w / w.sum()


def exponential_sample(scores, eta: float, rng: np.random.Generator) -> int:
    """Samples a 1-indexed expert with P(n) proportional to ``exp(-eta * scores[n] / 2)``."""
    p = exponential_probabilities(scores, eta)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1)) + 1
