"""File-system staging of stream segments, cycle manifests and feature rows.

Two CSV dialects are used:

* fast: a ``# device=.. channel=.. rate_hz=.. start_us=..`` header and one
  value per line, timestamps implicit from the header;
* timed: the same header plus ``kind=``, a ``timestamp_us,value`` column line
  and explicit timestamps. Slow streams and any segment whose spacing is
  irregular (e.g. after cleaning) are written this way.

Values are written with 9 significant digits in positional notation.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

CHANNELS = ("power", "current", "vibration", "temperature")
STREAM_KINDS = ("slow", "fast")
FAST_RATE_MIN, FAST_RATE_MAX = 128, 16384

AVG_FAST_LINE_BYTES = 9
AVG_SLOW_LINE_BYTES = 28


class StorageError(Exception):
    pass


class MalformedCsv(StorageError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class PathExists(StorageError):
    pass


class UnknownCycle(StorageError):
    pass


class IllegalTransition(StorageError):
    pass


def is_valid_fast_rate(rate_hz: float) -> bool:
    r = float(rate_hz)
    if not r.is_integer():
        return False
    r = int(r)
    return FAST_RATE_MIN <= r <= FAST_RATE_MAX and (r & (r - 1)) == 0


def check_rate(stream_kind: str, rate_hz: float) -> None:
    if stream_kind == "slow":
        if float(rate_hz) != 1.0:
            raise ValueError(f"slow streams sample at 1 Hz, got {rate_hz}")
    elif stream_kind == "fast":
        if not is_valid_fast_rate(rate_hz):
            raise ValueError(f"fast rate must be a power of two in [128, 16384], got {rate_hz}")
    else:
        raise ValueError(f"unknown stream kind {stream_kind!r}")


def implicit_timestamps(start_us: int, rate_hz: float, n: int) -> np.ndarray:
    """start_us + i * 1e6 / rate_hz, rounded half-up to whole microseconds."""
    i = np.arange(n, dtype=np.int64)
    r = float(rate_hz)
    if r.is_integer():
        r = int(r)
        return start_us + (i * 2_000_000 + r) // (2 * r)
    return start_us + np.floor(i * (1e6 / r) + 0.5).astype(np.int64)


@dataclass(eq=False)
class StreamSegment:
    device_id: str
    channel: str
    stream_kind: str
    start_us: int
    rate_hz: float
    values: np.ndarray
    explicit_timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.start_us = int(self.start_us)
        if self.explicit_timestamps is not None:
            self.explicit_timestamps = np.asarray(self.explicit_timestamps, dtype=np.int64)
            if len(self.explicit_timestamps) != len(self.values):
                raise ValueError("timestamps and values differ in length")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        if self.explicit_timestamps is not None:
            return self.explicit_timestamps
        return implicit_timestamps(self.start_us, self.rate_hz, len(self.values))

    def __eq__(self, other) -> bool:
        if not isinstance(other, StreamSegment):
            return NotImplemented
        return (
            (self.device_id, self.channel, self.stream_kind, self.start_us, float(self.rate_hz))
            == (other.device_id, other.channel, other.stream_kind, other.start_us, float(other.rate_hz))
            and (self.explicit_timestamps is None) == (other.explicit_timestamps is None)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def __repr__(self) -> str:
        ts = "explicit" if self.explicit_timestamps is not None else "implicit"
        return (f"StreamSegment({self.device_id}/{self.channel}/{self.stream_kind}, "
                f"start_us={self.start_us}, rate_hz={self.rate_hz}, n={len(self)}, {ts})")


# -- value formatting ---------------------------------------------------------

def format_value(v: float) -> str:
    s = "%.9g" % v
    if "e" in s or "n" in s:
        if not np.isfinite(v):
            raise ValueError(f"non-finite value {v!r}")
        s = np.format_float_positional(v, precision=9, unique=False, fractional=False, trim="-")
    return s


def _format_values(values: np.ndarray) -> list[str]:
    return [format_value(v) for v in values.tolist()]


def _fmt_rate(rate_hz: float) -> str:
    r = float(rate_hz)
    return str(int(r)) if r.is_integer() else repr(r)


def _parse_values(lines: list[str], path, first_line: int) -> np.ndarray:
    if not lines:
        return np.empty(0)
    try:
        arr = np.array(lines, dtype=np.float64)
    except ValueError:
        arr = None
    if arr is not None:
        bad = np.flatnonzero(~np.isfinite(arr))
        if len(bad) == 0:
            return arr
        raise MalformedCsv(path, first_line + int(bad[0]), f"non-finite value {lines[bad[0]]!r}")
    for k, text in enumerate(lines):
        try:
            v = float(text)
        except ValueError:
            raise MalformedCsv(path, first_line + k, f"bad value {text!r}") from None
        if not np.isfinite(v):
            raise MalformedCsv(path, first_line + k, f"non-finite value {text!r}")
    raise MalformedCsv(path, first_line, "unparseable values")  # pragma: no cover


_HEADER_RE = re.compile(r"#(?:\s+\w+=\S*)+\s*")


def _parse_header(line: str, path, lineno: int = 1) -> dict[str, str]:
    line = line.rstrip("\r\n")
    if not _HEADER_RE.fullmatch(line):
        raise MalformedCsv(path, lineno, f"bad header {line!r}")
    fields = dict(tok.split("=", 1) for tok in line[1:].split())
    for key in ("device", "channel", "rate_hz", "start_us"):
        if key not in fields:
            raise MalformedCsv(path, lineno, f"header missing {key}")
    try:
        float(fields["rate_hz"])
        int(fields["start_us"])
    except ValueError:
        raise MalformedCsv(path, lineno, "garbled header numbers") from None
    return fields


def format_header(device_id: str, channel: str, rate_hz: float, start_us: int,
                  kind: str | None = None) -> str:
    head = f"# device={device_id} channel={channel}"
    if kind is not None:
        head += f" kind={kind}"
    return head + f" rate_hz={_fmt_rate(rate_hz)} start_us={int(start_us)}"


# -- atomic writes ------------------------------------------------------------

def atomic_write(path: str | Path, data: bytes, overwrite: bool = False) -> Path:
    """Write ``data`` via ``<path>.tmp`` + fsync + rename."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise PathExists(str(path))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


# -- fast dialect -------------------------------------------------------------

def format_fast_block(segment: StreamSegment, with_kind: bool = False) -> str:
    head = format_header(segment.device_id, segment.channel, segment.rate_hz, segment.start_us,
                         segment.stream_kind if with_kind else None)
    body = _format_values(segment.values)
    return "\n".join([head, *body]) + "\n"


def write_fast_csv(segment: StreamSegment, path: str | Path, overwrite: bool = False) -> Path:
    if segment.explicit_timestamps is not None:
        raise ValueError("fast CSV needs implicit timestamps; use write_slow_csv")
    check_rate("fast", segment.rate_hz)
    return atomic_write(path, format_fast_block(segment).encode("ascii"), overwrite)


def read_fast_csv(path: str | Path) -> StreamSegment:
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise MalformedCsv(path, 1, "missing header")
    h = _parse_header(lines[0], path)
    if not is_valid_fast_rate(float(h["rate_hz"])):
        raise MalformedCsv(path, 1, f"invalid fast rate {h['rate_hz']}")
    values = _parse_values(lines[1:], path, 2)
    return StreamSegment(h["device"], h["channel"], "fast", int(h["start_us"]),
                         float(h["rate_hz"]), values)


# -- timed dialect ------------------------------------------------------------

TIMED_COLUMNS = "timestamp_us,value"


def write_slow_csv(segment: StreamSegment, path: str | Path, overwrite: bool = False) -> Path:
    """Write a segment with explicit per-row timestamps (slow or cleaned data)."""
    ts = segment.timestamps
    head = format_header(segment.device_id, segment.channel, segment.rate_hz,
                         segment.start_us, segment.stream_kind)
    rows = [f"{t},{v}" for t, v in zip(ts.tolist(), _format_values(segment.values))]
    data = "\n".join([head, TIMED_COLUMNS, *rows]) + "\n"
    return atomic_write(path, data.encode("ascii"), overwrite)


def read_slow_csv(path: str | Path) -> StreamSegment:
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if len(lines) < 2:
        raise MalformedCsv(path, len(lines) + 1, "missing header")
    h = _parse_header(lines[0], path)
    kind = h.get("kind", "slow")
    if kind not in STREAM_KINDS:
        raise MalformedCsv(path, 1, f"unknown kind {kind!r}")
    if lines[1].strip() != TIMED_COLUMNS:
        raise MalformedCsv(path, 2, f"expected {TIMED_COLUMNS!r}")
    ts = np.empty(len(lines) - 2, dtype=np.int64)
    vals = []
    for k, line in enumerate(lines[2:]):
        parts = line.split(",")
        if len(parts) != 2:
            raise MalformedCsv(path, k + 3, "expected two columns")
        try:
            ts[k] = int(parts[0])
        except ValueError:
            raise MalformedCsv(path, k + 3, f"bad timestamp {parts[0]!r}") from None
        vals.append(parts[1])
    values = _parse_values(vals, path, 3)
    return StreamSegment(h["device"], h["channel"], kind, int(h["start_us"]),
                         float(h["rate_hz"]), values, ts)


def write_segment(segment: StreamSegment, path: str | Path, overwrite: bool = False) -> Path:
    if segment.explicit_timestamps is None and segment.stream_kind == "fast":
        return write_fast_csv(segment, path, overwrite)
    return write_slow_csv(segment, path, overwrite)


def read_segment(path: str | Path) -> StreamSegment:
    with open(path, encoding="ascii") as fh:
        fh.readline()
        second = fh.readline().strip()
    if second == TIMED_COLUMNS:
        return read_slow_csv(path)
    return read_fast_csv(path)


# -- cycle manifests ----------------------------------------------------------

STATUS_ORDER = ("notified", "downloaded", "cleaned", "featured", "classified")
STATUSES = STATUS_ORDER + ("failed",)


def status_rank(status: str) -> int:
    return STATUS_ORDER.index(status) if status in STATUS_ORDER else len(STATUS_ORDER)


def transition_allowed(old: str, new: str) -> bool:
    if new not in STATUSES:
        return False
    if old == new:
        return True
    if old == "failed":
        return False
    if new == "failed":
        return True
    return STATUS_ORDER.index(new) == STATUS_ORDER.index(old) + 1


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class CycleRecord:
    cycle_id: str
    device_id: str
    start_us: int
    end_us: int
    status: str = "notified"
    files: dict[str, str] = field(default_factory=dict)
    created_at: str = field(default_factory=_utc_now)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "cycle_id": self.cycle_id,
            "device_id": self.device_id,
            "start_us": self.start_us,
            "end_us": self.end_us,
            "status": self.status,
            "files": dict(self.files),
            "created_at": self.created_at,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CycleRecord":
        return cls(d["cycle_id"], d["device_id"], int(d["start_us"]), int(d["end_us"]),
                   d["status"], dict(d.get("files", {})), d["created_at"], d.get("error"))


def file_key(channel: str, kind: str, level: str) -> str:
    return f"{channel}.{kind}.{level}"


class Storage:
    """Root of the staging tree::

        <root>/cycles/<cycle_id>.json
        <root>/data/<cycle_id>/<channel>.<slow|fast>.<raw|clean>.csv
        <root>/features/<cycle_id>.csv
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        for sub in ("cycles", "data", "features", "predictions", "models"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def manifest_path(self, cycle_id: str) -> Path:
        return self.root / "cycles" / f"{cycle_id}.json"

    def data_path(self, cycle_id: str, channel: str, kind: str, level: str) -> Path:
        return self.root / "data" / cycle_id / f"{channel}.{kind}.{level}.csv"

    def features_path(self, cycle_id: str) -> Path:
        return self.root / "features" / f"{cycle_id}.csv"

    def prediction_path(self, cycle_id: str) -> Path:
        return self.root / "predictions" / f"{cycle_id}.json"

    def model_path(self, name: str = "active") -> Path:
        return self.root / "models" / f"{name}.json"

    def write_manifest(self, record: CycleRecord) -> Path:
        if record.status not in STATUSES:
            raise ValueError(f"unknown status {record.status!r}")
        if record.end_us <= record.start_us:
            raise ValueError("end_us must be after start_us")
        path = self.manifest_path(record.cycle_id)
        if path.exists():
            old = self.load_manifest(record.cycle_id)
            if not transition_allowed(old.status, record.status):
                raise IllegalTransition(f"{old.status} -> {record.status}")
        for key, rel in record.files.items():
            if not (self.root / rel).exists():
                raise StorageError(f"manifest references missing file {rel} ({key})")
        data = json.dumps(record.to_dict(), indent=2, sort_keys=True).encode("utf-8")
        return atomic_write(path, data, overwrite=True)

    def load_manifest(self, cycle_id: str) -> CycleRecord:
        path = self.manifest_path(cycle_id)
        try:
            return CycleRecord.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise UnknownCycle(cycle_id) from None

    def list_manifests(self) -> list[CycleRecord]:
        out = []
        for p in sorted((self.root / "cycles").glob("*.json")):
            out.append(CycleRecord.from_dict(json.loads(p.read_text(encoding="utf-8"))))
        return out

    def relative(self, path: Path) -> str:
        return str(Path(path).relative_to(self.root))


# -- feature rows -------------------------------------------------------------

def write_feature_csv(names: list[str], values, path: str | Path, overwrite: bool = True) -> Path:
    vals = np.asarray(values, dtype=np.float64)
    if len(names) != len(vals):
        raise ValueError("names and values differ in length")
    data = ",".join(names) + "\n" + ",".join(repr(float(v)) for v in vals) + "\n"
    return atomic_write(path, data.encode("ascii"), overwrite)


def read_feature_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if len(lines) != 2:
        raise MalformedCsv(path, min(len(lines), 2) + 1, "feature file needs header + one row")
    names = lines[0].split(",")
    try:
        vals = np.array([float(x) for x in lines[1].split(",")])
    except ValueError:
        raise MalformedCsv(path, 2, "bad feature value") from None
    if len(vals) != len(names):
        raise MalformedCsv(path, 2, "row length differs from header")
    return names, vals


# -- volume estimate ----------------------------------------------------------

def estimate_cycle_bytes(duration_s: float, fast_rate_hz: float, n_fast_channels: int,
                         slow_channels: int) -> int:
    """Approximate on-disk size of one cycle in the CSV dialects above."""
    if duration_s <= 0 or fast_rate_hz <= 0 or n_fast_channels < 0 or slow_channels < 0:
        raise ValueError("arguments must be positive")
    fast = duration_s * fast_rate_hz * n_fast_channels * AVG_FAST_LINE_BYTES
    slow = duration_s * slow_channels * AVG_SLOW_LINE_BYTES
    return int(round(fast + slow))
