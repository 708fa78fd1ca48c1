import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotpipe import storage
from iotpipe.storage import (
    CycleRecord,
    IllegalTransition,
    MalformedCsv,
    PathExists,
    Storage,
    StreamSegment,
    UnknownCycle,
    estimate_cycle_bytes,
    read_fast_csv,
    read_slow_csv,
    write_fast_csv,
    write_slow_csv,
)


def slow_segment(ts, vals):
    return StreamSegment("wm-01", "power", "slow", ts[0] if ts else 0, 1, vals, ts)


def test_slow_round_trip(tmp_path):
    seg = slow_segment([1_000_000, 2_000_000, 3_000_000], [12.5, 2001.25, -0.125])
    write_slow_csv(seg, tmp_path / "p.csv")
    assert read_slow_csv(tmp_path / "p.csv") == seg


def test_slow_non_monotonic_reads(tmp_path):
    seg = slow_segment([3, 1, 2], [1.0, 2.0, 3.0])
    write_slow_csv(seg, tmp_path / "p.csv")
    back = read_slow_csv(tmp_path / "p.csv")
    assert back.timestamps.tolist() == [3, 1, 2]


def test_slow_overflow_value_reports_line(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("# device=d channel=power kind=slow rate_hz=1 start_us=0\n"
                 "timestamp_us,value\n0,1.5\n1000000,1e999\n")
    with pytest.raises(MalformedCsv) as exc:
        read_slow_csv(p)
    assert exc.value.line == 4


def test_writes_never_overwrite(tmp_path):
    seg = slow_segment([0], [1.0])
    write_slow_csv(seg, tmp_path / "p.csv")
    with pytest.raises(PathExists):
        write_slow_csv(seg, tmp_path / "p.csv")
    write_slow_csv(seg, tmp_path / "p.csv", overwrite=True)


def test_fast_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vals = np.array([float(storage.format_value(v)) for v in rng.normal(size=2048)])
    seg = StreamSegment("wm-01", "current", "fast", 1_700_000_000_000_000, 2048, vals)
    write_fast_csv(seg, tmp_path / "c.csv")
    assert read_fast_csv(tmp_path / "c.csv") == seg
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "# device=wm-01 channel=current rate_hz=2048 start_us=1700000000000000"


def test_fast_invalid_rate_rejected_on_read(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("# device=d channel=current rate_hz=1000 start_us=0\n1.0\n")
    with pytest.raises(MalformedCsv):
        read_fast_csv(p)


def test_fast_empty_after_header(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("# device=d channel=current rate_hz=2048 start_us=5\n")
    seg = read_fast_csv(p)
    assert len(seg) == 0 and seg.start_us == 5


@pytest.mark.parametrize("head", ["", "device=d\n", "# device=d channel=c start_us=0\n",
                                  "# device=d channel=c rate_hz=x start_us=0\n"])
def test_fast_garbled_header(tmp_path, head):
    p = tmp_path / "c.csv"
    p.write_text(head + "1.0\n")
    with pytest.raises(MalformedCsv):
        read_fast_csv(p)


def test_fast_bad_value_line(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("# device=d channel=c rate_hz=2048 start_us=0\n1.0\nabc\n2.0\n")
    with pytest.raises(MalformedCsv) as exc:
        read_fast_csv(p)
    assert exc.value.line == 3


def test_no_scientific_notation():
    for v in (1e-7, 3.2e12, -4.5e-9, 123456789012.0):
        s = storage.format_value(v)
        assert "e" not in s.lower()
        assert float(s) == pytest.approx(v, rel=1e-8)


def test_implicit_timestamps_rounding():
    ts = storage.implicit_timestamps(0, 2048, 5)
    # 1e6/2048 = 488.28125 us
    assert ts.tolist() == [0, 488, 977, 1465, 1953]


finite = st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e12, max_value=1e12)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, max_size=50), st.sampled_from([128, 1024, 2048, 16384]),
       st.integers(0, 2**52))
def test_fast_write_deterministic_and_stable(tmp_path_factory, vals, rate, start):
    d = tmp_path_factory.mktemp("f")
    seg = StreamSegment("dev", "vibration", "fast", start, rate, vals)
    write_fast_csv(seg, d / "a.csv")
    write_fast_csv(seg, d / "b.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()
    once = read_fast_csv(d / "a.csv")
    write_fast_csv(once, d / "c.csv")
    assert read_fast_csv(d / "c.csv") == once
    assert np.allclose(once.values, seg.values, rtol=1e-8, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**53), finite), max_size=40))
def test_slow_write_idempotent(tmp_path_factory, rows):
    d = tmp_path_factory.mktemp("s")
    seg = StreamSegment("dev", "power", "slow", 0, 1, [v for _, v in rows], [t for t, _ in rows])
    write_slow_csv(seg, d / "a.csv")
    once = read_slow_csv(d / "a.csv")
    assert once.timestamps.tolist() == [t for t, _ in rows]
    write_slow_csv(once, d / "b.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


# --- manifests --------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    st_ = Storage(tmp_path)
    rec = CycleRecord("c1", "wm-01", 0, 60_000_000)
    st_.write_manifest(rec)
    assert st_.load_manifest("c1") == rec
    assert json.loads((tmp_path / "cycles" / "c1.json").read_text())["status"] == "notified"


def test_manifest_unknown(tmp_path):
    with pytest.raises(UnknownCycle):
        Storage(tmp_path).load_manifest("nope")


def test_manifest_illegal_regression(tmp_path):
    st_ = Storage(tmp_path)
    rec = CycleRecord("c1", "wm-01", 0, 1)
    for status in storage.STATUS_ORDER:
        rec.status = status
        st_.write_manifest(rec)
    rec.status = "downloaded"
    with pytest.raises(IllegalTransition):
        st_.write_manifest(rec)


def test_manifest_requires_referenced_files(tmp_path):
    st_ = Storage(tmp_path)
    rec = CycleRecord("c1", "wm-01", 0, 1, files={"power.slow.raw": "data/c1/power.slow.raw.csv"})
    with pytest.raises(storage.StorageError):
        st_.write_manifest(rec)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(storage.STATUSES), max_size=12))
def test_status_never_regresses(tmp_path_factory, seq):
    st_ = Storage(tmp_path_factory.mktemp("m"))
    rec = CycleRecord("c", "d", 0, 1)
    st_.write_manifest(rec)
    history = ["notified"]
    for status in seq:
        rec.status = status
        try:
            st_.write_manifest(rec)
        except IllegalTransition:
            continue
        history.append(status)
    ranks = [storage.status_rank(s) for s in history]
    assert ranks == sorted(ranks)
    assert st_.load_manifest("c").status == history[-1]


# --- feature rows -----------------------------------------------------------

def test_feature_csv_round_trip(tmp_path):
    names = [f"f{i}" for i in range(79)]
    vals = np.linspace(-1, 1, 79) / 3
    storage.write_feature_csv(names, vals, tmp_path / "x.csv")
    n2, v2 = storage.read_feature_csv(tmp_path / "x.csv")
    assert n2 == names and np.array_equal(v2, vals)


# --- estimate ---------------------------------------------------------------

def test_estimate_two_hour_cycle():
    b = estimate_cycle_bytes(7200, 2048, 2, 1)
    assert b == 7200 * 2048 * 2 * 9 + 7200 * 28
    assert 150e6 <= b <= 1.2e9


def test_estimate_slow_only():
    assert estimate_cycle_bytes(3600, 2048, 0, 1) == 100_800


def test_estimate_tiny():
    assert estimate_cycle_bytes(1, 128, 1, 0) == 1152
