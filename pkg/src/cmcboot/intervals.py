"""Empirical quantiles and bootstrap confidence intervals."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import CMCError


class EmptySamples(CMCError, ValueError):
    pass


class CIMethod(str, enum.Enum):
    PERCENTILE = "percentile"
    PIVOT = "pivot"
    CLT = "clt"


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: CIMethod
    degenerate: bool = False

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"lower {self.lower!r} exceeds upper {self.upper!r}")

    @property
    def width(self) -> float:
        return self.upper - self.lower


def quantile_rank(alpha: float, B: int) -> int:
    """1-based order-statistic rank ``clamp(ceil(alpha * B), 1, B)``."""
    return min(max(math.ceil(alpha * B), 1), B)


def empirical_quantile(samples, alpha: float) -> float:
    """Left-continuous inverse of the empirical CDF, ``inf{x : F(x) >= alpha}``.

    No interpolation: returns the order statistic ``x_(k)`` with
    ``k = ceil(alpha * B)`` clamped to ``[1, B]``.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise EmptySamples("cannot take a quantile of zero samples")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    return float(x[quantile_rank(alpha, x.size) - 1])


def quantile_pair(samples: np.ndarray, alpha: float):
    """Lower ``alpha/2`` and upper ``1 - alpha/2`` quantiles along axis 0.

    Vectorized over any trailing axes; used by the harness on whole replicate
    arrays at once.
    """
    samples = np.asarray(samples, dtype=float)
    B = samples.shape[0]
    if B == 0:
        raise EmptySamples("cannot take a quantile of zero samples")
    lo_k = quantile_rank(alpha / 2, B) - 1
    hi_k = quantile_rank(1 - alpha / 2, B) - 1
    part = np.partition(samples, [lo_k, hi_k], axis=0)
    return part[lo_k], part[hi_k]


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def percentile_ci(samples, alpha: float) -> ConfidenceInterval:
    _check_alpha(alpha)
    lo, hi = quantile_pair(np.asarray(samples, dtype=float).ravel(), alpha)
    return ConfidenceInterval(float(lo), float(hi), 1 - alpha, CIMethod.PERCENTILE,
                              bool(lo == hi))


def pivot_ci(samples, point_estimate: float, alpha: float) -> ConfidenceInterval:
    """Basic bootstrap interval ``[2 theta - q_hi, 2 theta - q_lo]``."""
    _check_alpha(alpha)
    lo, hi = quantile_pair(np.asarray(samples, dtype=float).ravel(), alpha)
    lower, upper = 2 * point_estimate - hi, 2 * point_estimate - lo
    return ConfidenceInterval(float(lower), float(upper), 1 - alpha, CIMethod.PIVOT,
                              bool(lo == hi))


def covers(ci: ConfidenceInterval, truth: float) -> bool:
    return bool(ci.lower <= truth <= ci.upper)
