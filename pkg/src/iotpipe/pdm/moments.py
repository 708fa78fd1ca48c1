"""Population moment statistics and the time-domain feature block."""

from __future__ import annotations

import numpy as np

VARIANCE_FLOOR = 1e-24
RMS_FLOOR = 1e-12

TIME_STATS = ("min", "max", "mean", "std", "rms", "skewness", "kurtosis",
              "peak_to_peak", "crest_factor")


def _central(values) -> tuple[np.ndarray, float]:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty input")
    d = x - x.mean()
    return d, float(np.mean(d * d))


def skewness(values) -> float:
    """m3 / m2**1.5 with population moments; 0 when the variance vanishes."""
    d, m2 = _central(values)
    if m2 < VARIANCE_FLOOR:
        return 0.0
    return float(np.mean(d * d * d) / m2**1.5)


def excess_kurtosis(values) -> float:
    """m4 / m2**2 - 3 with population moments; 0 when the variance vanishes."""
    d, m2 = _central(values)
    if m2 < VARIANCE_FLOOR:
        return 0.0
    d2 = d * d
    return float(np.mean(d2 * d2) / (m2 * m2) - 3.0)


def time_features(values) -> list[float]:
    """The nine time-domain statistics in ``TIME_STATS`` order; zeros for empty input."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return [0.0] * len(TIME_STATS)
    lo, hi = float(x.min()), float(x.max())
    rms = float(np.sqrt(np.mean(x * x)))
    peak = max(abs(lo), abs(hi))
    return [
        lo,
        hi,
        float(x.mean()),
        float(x.std()),
        rms,
        skewness(x),
        excess_kurtosis(x),
        hi - lo,
        peak / rms if rms >= RMS_FLOOR else 0.0,
    ]
