"""Data cleaning: ordering, de-duplication, robust outlier replacement, gap detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..storage import StreamSegment, implicit_timestamps

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class CleanParams:
    outlier_sigmas: float = 5.0
    median_window: int = 11
    gap_factor: float = 1.5
    max_passes: int = 200


@dataclass
class CleanReport:
    cycle_id: str
    channel: str
    duplicates_removed: int = 0
    outliers_clipped: int = 0
    gaps: list[tuple[int, int]] = field(default_factory=list)
    sorted: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "cycle_id": self.cycle_id,
            "channel": self.channel,
            "duplicates_removed": self.duplicates_removed,
            "outliers_clipped": self.outliers_clipped,
            "gaps": [list(g) for g in self.gaps],
            "sorted": self.sorted,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CleanReport":
        return cls(d["cycle_id"], d["channel"], int(d["duplicates_removed"]),
                   int(d["outliers_clipped"]), [tuple(g) for g in d["gaps"]],
                   bool(d["sorted"]), d.get("note", ""))

    def missing_samples(self, rate_hz: float) -> int:
        step = 1e6 / rate_hz
        return int(sum(max(0, round((b - a) / step) - 1) for a, b in self.gaps))


def window_medians(values: np.ndarray, idx: np.ndarray, half: int) -> np.ndarray:
    """Median of the centred ``2*half+1`` window at each index in ``idx``;
    windows are truncated at the segment ends."""
    n = len(values)
    padded = np.concatenate([np.full(half, np.nan), values, np.full(half, np.nan)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1)[idx]
    inner = (idx >= half) & (idx < n - half)
    out = np.empty(len(idx))
    if inner.any():
        out[inner] = np.median(windows[inner], axis=1)
    if (~inner).any():
        out[~inner] = np.nanmedian(windows[~inner], axis=1)
    return out


def clean(segment: StreamSegment, params: CleanParams = CleanParams(),
          cycle_id: str = "") -> tuple[StreamSegment, CleanReport]:
    """Sort by timestamp, drop repeated timestamps (first occurrence wins),
    replace samples further than ``outlier_sigmas`` robust sigmas from the
    median, and report inter-sample gaps wider than ``gap_factor`` periods.

    Flagged samples are replaced by the median of their centred window. The
    flag-and-replace pass is repeated, recomputing the segment median and MAD,
    until it changes nothing; a second call on the output is then a no-op.
    """
    report = CleanReport(cycle_id, segment.channel)
    ts = segment.timestamps
    vals = segment.values.copy()

    order = np.argsort(ts, kind="stable")
    report.sorted = bool(np.any(order != np.arange(len(order))))
    ts, vals = ts[order], vals[order]
    if len(ts):
        keep = np.concatenate([[True], np.diff(ts) != 0])
        report.duplicates_removed = int(len(ts) - keep.sum())
        ts, vals = ts[keep], vals[keep]

    replaced = np.zeros(len(vals), dtype=bool)
    for _ in range(params.max_passes):
        if len(vals) == 0:
            break
        med = float(np.median(vals))
        mad = float(np.median(np.abs(vals - med)))
        if mad == 0.0:
            if not replaced.any():
                report.note = "zero MAD: outlier step skipped"
            break
        idx = np.flatnonzero(np.abs(vals - med) > params.outlier_sigmas * MAD_TO_SIGMA * mad)
        if idx.size == 0:
            break
        new = window_medians(vals, idx, params.median_window // 2)
        changed = new != vals[idx]
        if not changed.any():
            break
        vals[idx] = new
        replaced[idx[changed]] = True
    report.outliers_clipped = int(replaced.sum())

    if len(ts) > 1:
        limit = params.gap_factor * 1e6 / float(segment.rate_hz)
        wide = np.flatnonzero(np.diff(ts) > limit)
        report.gaps = [(int(ts[i]), int(ts[i + 1])) for i in wide]

    start = int(ts[0]) if len(ts) else segment.start_us
    regular = (segment.stream_kind == "fast" and len(ts) > 0
               and np.array_equal(ts, implicit_timestamps(start, segment.rate_hz, len(ts))))
    out = StreamSegment(segment.device_id, segment.channel, segment.stream_kind, start,
                        segment.rate_hz, vals, None if regular else ts)
    return out, report
