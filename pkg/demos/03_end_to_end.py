#!/usr/bin/env python3
"""
A whole deployment in one process.

Devices publish over MQTT, ingestion notifies the pipeline, and the four stages
(download, clean, feature, classify) run as workers. The read-only API then
serves the results.
"""

import json
import tempfile
import time
import urllib.request

from iotpipe.cluster import LocalCluster
from iotpipe.simulator import FaultMode, SimConfig, generate_cycle, publish_cycle

root = tempfile.mkdtemp(prefix="iotpipe-demo-")
with LocalCluster(root, api_port=0) as cluster:
    print("training a small bootstrap model ...")
    cluster.install_bootstrap_model(per_class=2)

    faults = [FaultMode("none", 0.0), FaultMode("bearing_fault", 0.9), FaultMode("heating_fault", 0.6)]
    ids = []
    t0 = time.monotonic()
    for i, fault in enumerate(faults):
        cfg = SimConfig(seed=40 + i, duration_scale=0.03, speedup=0, device_id=f"wm-{i + 1:02d}")
        sig = generate_cycle(fault=fault, config=cfg)
        rep = publish_cycle(sig, cfg, cluster.mqtt_endpoint, cluster.notify_url, cycle_id=f"demo-{i}")
        print(f"demo-{i}: {rep.batches} MQTT batches, fault={fault.label}")
        ids.append(f"demo-{i}")

    print("states:", cluster.wait_for(ids, timeout=120))
    print(f"all cycles through the pipeline in {time.monotonic() - t0:.1f} s\n")

    api = cluster.api.base_url
    get = lambda path: json.loads(urllib.request.urlopen(api + path).read())
    print("GET /api/devices ->", get("/api/devices"))
    for cid in ids:
        p = get(f"/api/cycles/{cid}/prediction")
        print(f"GET /api/cycles/{cid}/prediction -> {p['label']}")
    plot = get("/api/cycles/demo-1/plot?channel=vibration&points=8")
    print("vibration envelope (8 points):")
    for t, lo, hi in plot["points"]:
        print(f"  t={t}  min={lo: .3f}  max={hi: .3f}")
    status = get("/api/cluster/status")
    print("workers:", [w["worker_id"] for w in status["workers"]])
print("storage left under", root)
