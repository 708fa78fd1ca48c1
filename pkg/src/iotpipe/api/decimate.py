"""Min/max envelope decimation of stream segments for plotting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..storage import StreamSegment


@dataclass(eq=False)
class PlotSeries:
    cycle_id: str
    channel: str
    t_us: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    source_count: int

    def __len__(self) -> int:
        return len(self.t_us)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlotSeries):
            return NotImplemented
        return ((self.cycle_id, self.channel, self.source_count)
                == (other.cycle_id, other.channel, other.source_count)
                and np.array_equal(self.t_us, other.t_us)
                and np.array_equal(self.vmin, other.vmin)
                and np.array_equal(self.vmax, other.vmax))

    def to_dict(self) -> dict:
        return {"cycle_id": self.cycle_id, "channel": self.channel,
                "source_count": self.source_count,
                "points": [[int(t), float(lo), float(hi)]
                           for t, lo, hi in zip(self.t_us.tolist(), self.vmin.tolist(),
                                                self.vmax.tolist())]}


def bin_size(n: int, n_points: int) -> int:
    return max(1, math.ceil(n / n_points))


def decimate(segment: StreamSegment, n_points: int, cycle_id: str = "") -> PlotSeries:
    """Split into contiguous equal-count bins of ``ceil(n / n_points)`` samples
    (the last may be short) and emit (first timestamp, min, max) per bin."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    v = segment.values
    n = len(v)
    if n == 0:
        empty = np.zeros(0)
        return PlotSeries(cycle_id, segment.channel, empty.astype(np.int64), empty, empty, 0)
    ts = segment.timestamps
    if n <= n_points:
        return PlotSeries(cycle_id, segment.channel, ts.copy(), v.copy(), v.copy(), n)
    starts = np.arange(0, n, bin_size(n, n_points))
    return PlotSeries(cycle_id, segment.channel, ts[starts], np.minimum.reduceat(v, starts),
                      np.maximum.reduceat(v, starts), n)
