"""The four pipeline stage handlers: download, clean, feature and classify.

Each handler takes the stage context and one message body and returns the
body to forward to the next stage, or ``None``. Work is keyed by cycle_id and
overwrites its own outputs, so a redelivered message produces identical files.
A cycle whose manifest is already past the handler's stage is forwarded again
without recomputation. Domain failures mark the cycle ``failed``; transport
errors propagate so the stage loop retries them.
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ingest.service import CycleNotification
from ..storage import (
    CycleRecord,
    Storage,
    StreamSegment,
    UnknownCycle,
    atomic_write,
    file_key,
    implicit_timestamps,
    read_feature_csv,
    read_segment,
    status_rank,
    write_feature_csv,
    write_segment,
)
from .clean import CleanParams, CleanReport, clean
from .features import FeatureError, FeatureVector, features_from_segments
from .models import load_model, predict, save_model
from .spectrum import SpectrumError

log = logging.getLogger(__name__)

# (channel, stream kind) pulled for every cycle
CYCLE_STREAMS = (("power", "slow"), ("current", "fast"), ("vibration", "fast"))
REPORT_KEY = "clean.report"


@dataclass
class PdmContext:
    storage: Storage
    ingest_url: str | None = None
    model_name: str = "active"
    clean_params: CleanParams = field(default_factory=CleanParams)
    http_timeout_s: float = 30.0

    @classmethod
    def from_config(cls, cfg: dict) -> "PdmContext":
        return cls(Storage(cfg["storage_root"]), cfg.get("ingest_url"),
                   cfg.get("model_name", "active"), CleanParams(**cfg.get("clean_params", {})),
                   float(cfg.get("http_timeout_s", 30.0)))


def _msg(cycle_id: str) -> bytes:
    return json.dumps({"cycle_id": cycle_id}).encode("utf-8")


def _cycle_id(body: bytes) -> str:
    obj = json.loads(body)
    if not isinstance(obj, dict) or not obj.get("cycle_id"):
        raise ValueError("message has no cycle_id")
    return str(obj["cycle_id"])


def _already(rec: CycleRecord, status: str) -> bool:
    return rec.status != "failed" and status_rank(rec.status) >= status_rank(status)


def _fail(ctx: PdmContext, rec: CycleRecord, reason: str) -> None:
    log.warning("cycle %s failed: %s", rec.cycle_id, reason)
    rec.status, rec.error = "failed", reason
    ctx.storage.write_manifest(rec)


# -- download -----------------------------------------------------------------

def fetch_raw(base_url: str, device_id: str, channel: str, from_us: int, to_us: int,
              kind: str | None = None, timeout: float = 30.0
              ) -> tuple[np.ndarray, np.ndarray, float | None]:
    """Query the ingest HTTP API. Unknown devices read as an empty window."""
    q = {"from_us": from_us, "to_us": to_us}
    if kind:
        q["kind"] = kind
    path = f"/raw/{urllib.parse.quote(device_id)}/{urllib.parse.quote(channel)}"
    url = base_url.rstrip("/") + path + "?" + urllib.parse.urlencode(q)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            body = resp.read()
            rate = resp.headers.get("X-Rate-Hz")
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            return np.empty(0, dtype=np.int64), np.empty(0), None
        raise
    tok = body.split(b"\n", 1)[1].replace(b",", b" ").split()
    return (np.array(tok[0::2], dtype=np.int64), np.array(tok[1::2], dtype=np.float64),
            float(rate) if rate else None)


def _raw_segment(device: str, channel: str, kind: str, ts: np.ndarray, vals: np.ndarray,
                 rate: float | None, start_us: int) -> StreamSegment:
    if kind == "slow":
        return StreamSegment(device, channel, "slow", int(ts[0]) if len(ts) else start_us,
                             1 if rate is None else rate, vals, ts)
    if rate is None:
        rate = 2048.0
    t0 = int(ts[0]) if len(ts) else start_us
    regular = np.array_equal(ts, implicit_timestamps(t0, rate, len(ts)))
    return StreamSegment(device, channel, "fast", t0, rate, vals, None if regular else ts)


def download(ctx: PdmContext, body: bytes) -> bytes | None:
    note = CycleNotification.from_json(body)
    st = ctx.storage
    try:
        rec = st.load_manifest(note.cycle_id)
    except UnknownCycle:
        rec = CycleRecord(note.cycle_id, note.device_id, note.start_us, note.end_us)
        st.write_manifest(rec)
    if rec.status == "failed":
        return None
    if _already(rec, "downloaded"):
        return _msg(rec.cycle_id)
    if ctx.ingest_url is None:
        raise RuntimeError("download stage has no ingest_url configured")

    fetched = []
    for channel, kind in CYCLE_STREAMS:
        ts, vals, rate = fetch_raw(ctx.ingest_url, note.device_id, channel, note.start_us,
                                   note.end_us, kind, ctx.http_timeout_s)
        fetched.append((channel, kind, ts, vals, rate))
    if all(len(f[2]) == 0 for f in fetched):
        _fail(ctx, rec, "empty-window")
        return None

    files = {}
    for channel, kind, ts, vals, rate in fetched:
        seg = _raw_segment(note.device_id, channel, kind, ts, vals, rate, note.start_us)
        path = write_segment(seg, st.data_path(rec.cycle_id, channel, kind, "raw"), overwrite=True)
        files[file_key(channel, kind, "raw")] = st.relative(path)
    rec.files.update(files)
    rec.status = "downloaded"
    st.write_manifest(rec)
    return _msg(rec.cycle_id)


# -- clean --------------------------------------------------------------------

def clean_stage(ctx: PdmContext, body: bytes) -> bytes | None:
    st = ctx.storage
    rec = st.load_manifest(_cycle_id(body))
    if rec.status == "failed":
        return None
    if _already(rec, "cleaned"):
        return _msg(rec.cycle_id)
    reports = {}
    for channel, kind in CYCLE_STREAMS:
        key = file_key(channel, kind, "raw")
        if key not in rec.files:
            _fail(ctx, rec, f"missing raw file {key}")
            return None
        seg = read_segment(st.root / rec.files[key])
        out, rep = clean(seg, ctx.clean_params, rec.cycle_id)
        path = write_segment(out, st.data_path(rec.cycle_id, channel, kind, "clean"), overwrite=True)
        rec.files[file_key(channel, kind, "clean")] = st.relative(path)
        reports[channel] = rep.to_dict()
    rpath = st.root / "data" / rec.cycle_id / "clean_report.json"
    atomic_write(rpath, json.dumps(reports, sort_keys=True).encode("utf-8"), overwrite=True)
    rec.files[REPORT_KEY] = st.relative(rpath)
    rec.status = "cleaned"
    st.write_manifest(rec)
    return _msg(rec.cycle_id)


# -- features -----------------------------------------------------------------

def load_clean_cycle(st: Storage, rec: CycleRecord
                     ) -> tuple[dict[str, StreamSegment], dict[str, CleanReport]]:
    segs = {}
    for channel, kind in CYCLE_STREAMS:
        key = file_key(channel, kind, "clean")
        if key not in rec.files:
            raise FileNotFoundError(f"missing clean file {key}")
        segs[channel] = read_segment(st.root / rec.files[key])
    reports = {}
    if REPORT_KEY in rec.files:
        raw = json.loads((st.root / rec.files[REPORT_KEY]).read_text(encoding="utf-8"))
        reports = {ch: CleanReport.from_dict(d) for ch, d in raw.items()}
    return segs, reports


def extract_features(st: Storage, cycle_id: str) -> FeatureVector:
    """Features of a cleaned cycle, written to ``features/<cycle_id>.csv``."""
    rec = st.load_manifest(cycle_id)
    segs, reports = load_clean_cycle(st, rec)
    fv = features_from_segments(cycle_id, segs["power"], segs["current"], segs["vibration"],
                                rec.start_us, rec.end_us, reports)
    write_feature_csv(list(fv.names), fv.values, st.features_path(cycle_id), overwrite=True)
    return fv


def feature_stage(ctx: PdmContext, body: bytes) -> bytes | None:
    st = ctx.storage
    rec = st.load_manifest(_cycle_id(body))
    if rec.status == "failed":
        return None
    if _already(rec, "featured"):
        return _msg(rec.cycle_id)
    try:
        extract_features(st, rec.cycle_id)
    except (SpectrumError, FeatureError, FileNotFoundError) as exc:
        _fail(ctx, rec, f"features: {exc}")
        return None
    rec.files["features"] = st.relative(st.features_path(rec.cycle_id))
    rec.status = "featured"
    st.write_manifest(rec)
    return _msg(rec.cycle_id)


# -- classify -----------------------------------------------------------------

def classify_stage(ctx: PdmContext, body: bytes) -> bytes | None:
    st = ctx.storage
    rec = st.load_manifest(_cycle_id(body))
    if rec.status == "failed" or _already(rec, "classified"):
        return None
    model = load_model(st.model_path(ctx.model_name))
    names, values = read_feature_csv(st.features_path(rec.cycle_id))
    try:
        fv = FeatureVector(rec.cycle_id, tuple(names), values)
    except FeatureError as exc:
        _fail(ctx, rec, f"classify: {exc}")
        return None
    pred = predict(model, fv)
    path = st.prediction_path(rec.cycle_id)
    atomic_write(path, json.dumps(pred.to_dict(), sort_keys=True).encode("utf-8"), overwrite=True)
    rec.files["prediction"] = st.relative(path)
    rec.status = "classified"
    st.write_manifest(rec)
    return None


def install_model(st: Storage, model, name: str = "active") -> Path:
    return save_model(model, st.model_path(name))


HANDLERS = {
    "pdm.download": download,
    "pdm.clean": clean_stage,
    "pdm.feature": feature_stage,
    "pdm.classify": classify_stage,
}
