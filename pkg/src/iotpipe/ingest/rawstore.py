"""Append-only raw sample store fed by the MQTT endpoint.

Layout: ``<root>/<device>/<channel>/<YYYY-MM-DD>.csv``, each file a sequence
of fast-dialect blocks (one per received batch, ``kind=`` in the header).
An in-memory extent index answers window queries without rescanning files.
"""

from __future__ import annotations

import json
import math
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import storage

TOPIC_RE = re.compile(r"dev/([A-Za-z0-9._-]+)/(slow|fast)/(power|current|vibration|temperature)")


class IngestError(Exception):
    pass


class BadTopic(IngestError):
    pass


class BadPayload(IngestError):
    pass


class RateMismatch(IngestError):
    pass


class UnknownDevice(IngestError):
    pass


@dataclass
class SampleBatch:
    device_id: str
    channel: str
    stream_kind: str
    start_us: int
    rate_hz: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) == 0:
            raise BadPayload("values must be a non-empty list")
        try:
            storage.check_rate(self.stream_kind, self.rate_hz)
        except ValueError as exc:
            raise RateMismatch(str(exc)) from None

    @property
    def topic(self) -> str:
        return f"dev/{self.device_id}/{self.stream_kind}/{self.channel}"

    def to_payload(self) -> bytes:
        rate = float(self.rate_hz)
        return json.dumps({
            "start_us": int(self.start_us),
            "rate_hz": int(rate) if rate.is_integer() else rate,
            "values": self.values.tolist(),
        }, separators=(",", ":")).encode("utf-8")


def parse_publish(topic: str, payload: bytes) -> SampleBatch:
    m = TOPIC_RE.fullmatch(topic)
    if not m:
        raise BadTopic(topic)
    device_id, kind, channel = m.groups()
    try:
        obj = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadPayload(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise BadPayload("payload must be a JSON object")
    start_us, rate, values = obj.get("start_us"), obj.get("rate_hz"), obj.get("values")
    if not isinstance(start_us, int) or isinstance(start_us, bool):
        raise BadPayload("start_us must be an integer")
    if not isinstance(rate, (int, float)) or isinstance(rate, bool) or not rate > 0:
        raise BadPayload("rate_hz must be a positive number")
    if not isinstance(values, list) or not values:
        raise BadPayload("values must be a non-empty list")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
               for v in values):
        raise BadPayload("values must be finite numbers")
    return SampleBatch(device_id, channel, kind, start_us, rate, values)


@dataclass(frozen=True)
class _Extent:
    start_us: int
    rate_hz: float
    kind: str
    values: np.ndarray

    @property
    def end_us(self) -> int:
        return int(storage.implicit_timestamps(self.start_us, self.rate_hz, len(self.values))[-1])


def _day(start_us: int) -> str:
    return datetime.fromtimestamp(start_us / 1e6, tz=timezone.utc).strftime("%Y-%m-%d")


class RawStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._extents: dict[tuple[str, str], list[_Extent]] = {}
        self._locks: dict[tuple[str, str], threading.Lock] = {}
        self._meta_lock = threading.Lock()
        self._load()

    def _lock(self, key) -> threading.Lock:
        with self._meta_lock:
            return self._locks.setdefault(key, threading.Lock())

    def _load(self) -> None:
        for path in sorted(self.root.glob("*/*/*.csv")):
            device, channel = path.parent.parent.name, path.parent.name
            extents = self._extents.setdefault((device, channel), [])
            header = None
            values: list[str] = []
            for line in path.read_text(encoding="ascii").splitlines():
                if line.startswith("#"):
                    if header is not None:
                        extents.append(self._extent_from(header, values))
                    header, values = storage._parse_header(line, path), []
                elif line:
                    values.append(line)
            if header is not None:
                extents.append(self._extent_from(header, values))

    @staticmethod
    def _extent_from(header: dict, values: list[str]) -> _Extent:
        return _Extent(int(header["start_us"]), float(header["rate_hz"]),
                       header.get("kind", "fast"), np.array(values, dtype=np.float64))

    def devices(self) -> set[str]:
        return {d for d, _ in self._extents}

    def append(self, batch: SampleBatch) -> None:
        key = (batch.device_id, batch.channel)
        seg = storage.StreamSegment(batch.device_id, batch.channel, batch.stream_kind,
                                    batch.start_us, batch.rate_hz, batch.values)
        block = storage.format_fast_block(seg, with_kind=True)
        path = self.root / batch.device_id / batch.channel / f"{_day(batch.start_us)}.csv"
        with self._lock(key):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="ascii") as fh:
                fh.write(block)
            # values as written, so the index matches what a reload would see
            stored = np.array(block.splitlines()[1:], dtype=np.float64)
            ext = _Extent(batch.start_us, float(batch.rate_hz), batch.stream_kind, stored)
            with self._meta_lock:
                self._extents.setdefault(key, []).append(ext)

    def rate_of(self, device_id: str, channel: str, stream_kind: str | None = None) -> float | None:
        """Rate of the most recently appended matching extent, if any."""
        with self._meta_lock:
            extents = list(self._extents.get((device_id, channel), []))
        for e in reversed(extents):
            if stream_kind is None or e.kind == stream_kind:
                return e.rate_hz
        return None

    def sample_count(self, device_id: str, channel: str) -> int:
        return sum(len(e.values) for e in self._extents.get((device_id, channel), []))

    def query(self, device_id: str, channel: str, from_us: int, to_us: int,
              stream_kind: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Samples with timestamp in ``[from_us, to_us)``, ascending (stable for ties)."""
        if to_us <= from_us:
            raise ValueError("to_us must be greater than from_us")
        if device_id not in self.devices():
            raise UnknownDevice(device_id)
        with self._meta_lock:
            extents = list(self._extents.get((device_id, channel), []))
        ts_parts, val_parts = [], []
        for e in extents:
            if stream_kind is not None and e.kind != stream_kind:
                continue
            if e.start_us >= to_us or e.end_us < from_us:
                continue
            ts = storage.implicit_timestamps(e.start_us, e.rate_hz, len(e.values))
            mask = (ts >= from_us) & (ts < to_us)
            ts_parts.append(ts[mask])
            val_parts.append(e.values[mask])
        if not ts_parts:
            return np.empty(0, dtype=np.int64), np.empty(0)
        ts = np.concatenate(ts_parts)
        vals = np.concatenate(val_parts)
        order = np.argsort(ts, kind="stable")
        return ts[order], vals[order]
