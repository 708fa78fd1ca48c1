"""The 79-value feature catalog and its extraction from cleaned cycle streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..storage import StreamSegment
from .clean import CleanReport
from .moments import TIME_STATS, time_features
from .spectrum import SPECTRAL_STATS, spectrum_features

CATALOG_VERSION = 1

TIME_SIGNALS = ("power_slow", "current_fast", "vibration_fast")
SPECTRAL_SIGNALS = ("current_fast", "vibration_fast")
CYCLE_STATS = (
    "duration_s",
    "energy_wh",
    "slow_sample_count",
    "current_sample_count",
    "vibration_sample_count",
    "slow_gap_count",
    "fast_gap_count",
    "max_gap_s",
    "gap_ratio",
    "outliers_clipped",
    "duplicates_removed",
    "peak_power_time_frac",
)

FEATURE_NAMES: tuple[str, ...] = (
    tuple(f"{s}_{t}" for s in TIME_SIGNALS for t in TIME_STATS)
    + tuple(f"{s}_{t}" for s in SPECTRAL_SIGNALS for t in SPECTRAL_STATS)
    + tuple(f"cycle_{c}" for c in CYCLE_STATS)
)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 79


class FeatureError(ValueError):
    pass


@dataclass
class FeatureVector:
    cycle_id: str
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.names != FEATURE_NAMES:
            raise FeatureError("feature names do not match the catalog")
        if self.values.shape != (N_FEATURES,):
            raise FeatureError(f"expected {N_FEATURES} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, v in zip(self.names, self.values) if not np.isfinite(v)]
            raise FeatureError(f"non-finite features: {bad}")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.values)))


def _expected(duration_s: float, rate_hz: float) -> int:
    return int(round(duration_s * rate_hz))


def cycle_features(power: StreamSegment, current: StreamSegment, vibration: StreamSegment,
                   reports: dict[str, CleanReport], start_us: int, end_us: int) -> list[float]:
    duration_s = (end_us - start_us) / 1e6
    ts = power.timestamps
    p = power.values
    energy_wh = float(np.trapezoid(p, ts / 1e6) / 3600.0) if len(p) > 1 else 0.0
    if len(p):
        peak_frac = (float(ts[int(np.argmax(p))]) - start_us) / (end_us - start_us)
        peak_frac = min(1.0, max(0.0, peak_frac))
    else:
        peak_frac = 0.0

    rep = [reports[c] for c in ("power", "current", "vibration") if c in reports]
    all_gaps = [g for r in rep for g in r.gaps]
    max_gap_s = max(((b - a) / 1e6 for a, b in all_gaps), default=0.0)
    segs = (power, current, vibration)
    expected = sum(_expected(duration_s, s.rate_hz) for s in segs)
    missing = sum(max(0, _expected(duration_s, s.rate_hz) - len(s)) for s in segs)
    gap_ratio = missing / expected if expected else 0.0

    def gaps(ch):
        return len(reports[ch].gaps) if ch in reports else 0

    return [
        duration_s,
        energy_wh,
        float(len(power)),
        float(len(current)),
        float(len(vibration)),
        float(gaps("power")),
        float(gaps("current") + gaps("vibration")),
        max_gap_s,
        gap_ratio,
        float(sum(r.outliers_clipped for r in rep)),
        float(sum(r.duplicates_removed for r in rep)),
        peak_frac,
    ]


def features_from_segments(cycle_id: str, power: StreamSegment, current: StreamSegment,
                           vibration: StreamSegment, start_us: int, end_us: int,
                           reports: dict[str, CleanReport] | None = None) -> FeatureVector:
    """Assemble the catalog vector. Raises ``SpectrumError`` when a fast
    stream is shorter than one analysis window."""
    if end_us <= start_us:
        raise FeatureError("cycle has non-positive duration")
    reports = reports or {}
    values: list[float] = []
    for seg in (power, current, vibration):
        values += time_features(seg.values)
    for seg in (current, vibration):
        values += spectrum_features(seg.values, seg.rate_hz).as_list()
    values += cycle_features(power, current, vibration, reports, start_us, end_us)
    return FeatureVector(cycle_id, FEATURE_NAMES, np.array(values))
