"""Offline plot export: decimated ``t_us,min,max`` CSV straight from storage."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..storage import Storage, StorageError, atomic_write, format_value, read_segment
from .decimate import PlotSeries, decimate


class UnknownChannel(StorageError):
    pass


def channel_file(st: Storage, cycle_id: str, channel: str, level: str | None = None) -> Path:
    """Path of a cycle's channel file; the cleaned file wins unless ``level`` says otherwise."""
    rec = st.load_manifest(cycle_id)
    for lvl in ((level,) if level else ("clean", "raw")):
        for key, rel in sorted(rec.files.items()):
            parts = key.split(".")
            if len(parts) == 3 and parts[0] == channel and parts[2] == lvl:
                return st.root / rel
    raise UnknownChannel(f"{cycle_id} has no {level or 'clean/raw'} data for channel {channel!r}")


def load_series(st: Storage, cycle_id: str, channel: str, n_points: int,
                level: str | None = None) -> PlotSeries:
    return decimate(read_segment(channel_file(st, cycle_id, channel, level)), n_points, cycle_id)


def series_csv(series: PlotSeries) -> str:
    rows = ["t_us,min,max"]
    rows += [f"{t},{format_value(lo)},{format_value(hi)}"
             for t, lo, hi in zip(series.t_us.tolist(), series.vmin.tolist(), series.vmax.tolist())]
    return "\n".join(rows) + "\n"


def read_series_csv(path: str | Path, cycle_id: str = "", channel: str = "",
                    source_count: int = 0) -> PlotSeries:
    with open(path, encoding="ascii") as fh:
        if fh.readline().strip() != "t_us,min,max":
            raise ValueError(f"{path}: expected header t_us,min,max")
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    if data.size == 0:
        data = np.zeros((0, 3))
    return PlotSeries(cycle_id, channel, data[:, 0].astype(np.int64), data[:, 1], data[:, 2],
                      source_count)


def plot_export(storage_root: str | Path, cycle_id: str, channel: str, n_points: int,
                out_path: str | Path, level: str | None = None) -> PlotSeries:
    """Write the decimated series as CSV. Nothing is written if the cycle or channel is unknown."""
    series = load_series(Storage(storage_root), cycle_id, channel, n_points, level)
    atomic_write(out_path, series_csv(series).encode("ascii"), overwrite=True)
    return series


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="plot-export",
                                 description="Export a decimated min/max series of one cycle channel.")
    ap.add_argument("--cycle", required=True, help="cycle id")
    ap.add_argument("--channel", required=True, help="power, current or vibration")
    ap.add_argument("--points", type=int, default=2000, help="maximum number of points")
    ap.add_argument("--out", required=True, help="output CSV path")
    ap.add_argument("--storage", default="./store", help="storage root (default ./store)")
    ap.add_argument("--level", choices=("raw", "clean"), default=None,
                    help="data level (default: clean if present, else raw)")
    args = ap.parse_args(argv)
    if args.points < 1:
        ap.error("--points must be >= 1")
    try:
        s = plot_export(args.storage, args.cycle, args.channel, args.points, args.out, args.level)
    except StorageError as exc:
        print(f"plot-export: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(s)} points from {s.source_count} samples to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
