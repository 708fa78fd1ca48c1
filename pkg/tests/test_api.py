import hashlib
import json
import socket
import urllib.error
import urllib.request

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotpipe.api import (
    ApiServer,
    RemoteStatus,
    UnknownChannel,
    decimate,
    plot_export,
    read_series_csv,
)
from iotpipe.api.export import main as plot_export_main
from iotpipe.storage import Storage, StreamSegment


def seg(values, rate=2048.0, kind="fast", channel="current"):
    return StreamSegment("wm-01", channel, kind, 1_000_000, rate, np.asarray(values, float))


def bins_oracle(values, n_points):
    n = len(values)
    size = -(-n // n_points)
    out = []
    for i in range(0, n, size):
        chunk = list(values[i:i + size])
        out.append((i, min(chunk), max(chunk)))
    return out


# -- decimation --------------------------------------------------------------

def test_decimate_example():
    s = decimate(seg(np.arange(1, 9)), 4)
    assert s.vmin.tolist() == [1, 3, 5, 7] and s.vmax.tolist() == [2, 4, 6, 8]
    assert s.t_us.tolist() == seg(np.arange(1, 9)).timestamps[::2].tolist()
    assert s.source_count == 8


def test_decimate_identity_and_empty():
    x = np.array([3.0, -1.0, 2.0])
    s = decimate(seg(x), 10)
    assert s.vmin.tolist() == x.tolist() == s.vmax.tolist()
    assert len(decimate(seg([]), 5)) == 0
    with pytest.raises(ValueError):
        decimate(seg(x), 0)


def test_decimate_last_bin_short():
    s = decimate(seg(np.arange(10.0)), 4)  # bins of 3: {0,1,2},{3,4,5},{6,7,8},{9}
    assert s.vmin.tolist() == [0, 3, 6, 9] and s.vmax.tolist() == [2, 5, 8, 9]


@settings(max_examples=200, deadline=None)
@given(values=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=500),
       n_points=st.integers(1, 600))
def test_decimate_matches_oracle_and_keeps_envelope(values, n_points):
    s = decimate(seg(values), n_points)
    expected = bins_oracle(values, n_points) if len(values) > n_points else [
        (i, v, v) for i, v in enumerate(values)]
    ts = seg(values).timestamps
    assert [(int(t), lo, hi) for t, lo, hi in zip(s.t_us, s.vmin, s.vmax)] == [
        (int(ts[i]), lo, hi) for i, lo, hi in expected]
    assert len(s) <= n_points
    assert np.all(np.diff(s.t_us) > 0) and np.all(s.vmin <= s.vmax)
    assert s.vmin.min() == min(values) and s.vmax.max() == max(values)


def test_decimate_long_fast_stream():
    rng = np.random.default_rng(3)
    x = rng.normal(size=14_700_000)
    s = decimate(seg(x), 2000)
    assert len(s) == 2000
    assert s.vmin.min() == x.min() and s.vmax.max() == x.max()


# -- storage-backed endpoints ----------------------------------------------------

@pytest.fixture(scope="module")
def classified(tmp_path_factory):
    from iotpipe.cluster import LocalCluster
    from iotpipe.simulator import SimConfig, generate_cycle, publish_cycle

    root = tmp_path_factory.mktemp("cluster")
    c = LocalCluster(root, api_port=0)
    c.install_bootstrap_model(per_class=1)
    cfg = SimConfig(seed=9, duration_scale=40 / 2820, speedup=0)
    publish_cycle(generate_cycle(config=cfg), cfg, c.mqtt_endpoint, c.notify_url, cycle_id="api-1")
    assert c.wait_for(["api-1"], 60) == {"api-1": "classified"}
    yield c
    c.close()


def get(base, path):
    try:
        with urllib.request.urlopen(base + path, timeout=10) as r:
            return r.status, json.loads(r.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_fresh_system_has_no_devices(tmp_path):
    srv = ApiServer(Storage(tmp_path), port=0).start()
    assert get(srv.base_url, "/api/devices") == (200, [])
    status, body = get(srv.base_url, "/api/cycles/nope")
    assert status == 404 and body["error"] == "unknown-cycle"
    assert get(srv.base_url, "/api/cluster/status")[0] == 503
    srv.stop()


def test_cluster_status_broker_down(tmp_path):
    srv = ApiServer(Storage(tmp_path), RemoteStatus(("127.0.0.1", free_port()), ["q.x"]),
                    port=0).start()
    status, body = get(srv.base_url, "/api/cluster/status")
    assert status == 503 and body["error"] == "broker-unreachable"
    srv.stop()


def test_endpoints_after_classified_cycle(classified):
    base = classified.api.base_url
    assert get(base, "/api/devices") == (200, ["wm-01"])
    status, cycles = get(base, "/api/devices/wm-01/cycles")
    assert status == 200 and [c["cycle_id"] for c in cycles] == ["api-1"]
    assert get(base, "/api/devices/ghost/cycles")[0] == 404
    status, rec = get(base, "/api/cycles/api-1")
    assert status == 200 and rec["status"] == "classified"
    status, feats = get(base, "/api/cycles/api-1/features")
    assert status == 200 and len(feats["names"]) == 79 == len(feats["values"])
    status, pred = get(base, "/api/cycles/api-1/prediction")
    assert status == 200 and pred["label"] in pred["scores"]
    status, plot = get(base, "/api/cycles/api-1/plot?channel=vibration&points=500")
    assert status == 200 and len(plot["points"]) <= 500 and plot["source_count"] == 40 * 2048
    status, status_body = get(base, "/api/cluster/status")
    assert status == 200
    assert [m["machine_id"] for m in status_body["machines"]] == ["m1"]
    assert len(status_body["workers"]) == 4
    assert status_body["queues"]["q.classify"]["depth"] == 0
    assert status_body["scaling_decisions"] == []


@pytest.mark.parametrize("query,code", [
    ("points=0&channel=current", 400), ("points=x&channel=current", 400), ("points=10", 400),
    ("channel=temperature&points=10", 404), ("channel=current&points=10&level=cooked", 400)])
def test_plot_bad_queries(classified, query, code):
    assert get(classified.api.base_url, f"/api/cycles/api-1/plot?{query}")[0] == code


def test_service_is_read_only(classified):
    base = classified.api.base_url
    root = classified.storage.root
    before = tree_hash(root)
    for path in ["/api/devices", "/api/devices/wm-01/cycles", "/api/cycles/api-1",
                 "/api/cycles/api-1/features", "/api/cycles/api-1/prediction",
                 "/api/cycles/api-1/plot?channel=power&points=10", "/api/cluster/status",
                 "/api/cycles/zzz", "/api/unknown"]:
        get(base, path)
    req = urllib.request.Request(base + "/api/devices", data=b"{}", method="POST")
    with pytest.raises(urllib.error.HTTPError) as e:
        urllib.request.urlopen(req, timeout=5)
    assert e.value.code == 405
    assert tree_hash(root) == before


# -- plot export ------------------------------------------------------------------

def test_plot_export_roundtrip(classified, tmp_path):
    out = tmp_path / "v.csv"
    s = plot_export(classified.storage.root, "api-1", "vibration", 2000, out)
    back = read_series_csv(out, "api-1", "vibration", s.source_count)
    assert np.array_equal(back.t_us, s.t_us)
    assert np.allclose(back.vmin, s.vmin, rtol=1e-8) and np.allclose(back.vmax, s.vmax, rtol=1e-8)
    assert len(out.read_text().splitlines()) <= 2001


def test_plot_export_unknown_channel_writes_nothing(classified, tmp_path):
    out = tmp_path / "x.csv"
    with pytest.raises(UnknownChannel):
        plot_export(classified.storage.root, "api-1", "temperature", 100, out)
    assert not out.exists()
    assert plot_export_main(["--storage", str(classified.storage.root), "--cycle", "nope",
                             "--channel", "current", "--points", "10", "--out", str(out)]) == 2
    assert not out.exists()


def test_plot_export_cli(classified, tmp_path, capsys):
    out = tmp_path / "cli.csv"
    assert plot_export_main(["--storage", str(classified.storage.root), "--cycle", "api-1",
                             "--channel", "current", "--points", "2000", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t_us,min,max" and 1 < len(lines) <= 2001
    assert "wrote" in capsys.readouterr().out
