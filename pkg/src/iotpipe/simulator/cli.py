"""``simulate``: play simulated devices against an ingest endpoint, or write a dataset."""

from __future__ import annotations

import argparse
import logging
import sys
import threading
import time
from pathlib import Path

import numpy as np

from .dataset import CYCLE_SPACING_US, LABELS, SEVERITY_RANGE, make_dataset
from .generator import FaultMode, SimConfig, generate_cycle
from .prng import XorShiftRng, derive_seed
from .publisher import publish_cycle


def parse_mix(text: str) -> np.ndarray:
    parts = [float(p) for p in text.split(":")]
    if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
        raise argparse.ArgumentTypeError("fault mix is normal:bearing:heating with non-negative weights")
    w = np.array(parts)
    return w / w.sum()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError("endpoint is host:port")
    return host or "127.0.0.1", int(port)


def plan_device(device_id: str, device_index: int, n_cycles: int, mix: np.ndarray,
                base: SimConfig) -> list[tuple[str, str, FaultMode, SimConfig]]:
    """(cycle_id, label, fault, config) for one device, fully determined by the seed."""
    rng = XorShiftRng(derive_seed(base.seed, 0xDE71CE, device_index))
    u = rng.uniform(2 * n_cycles)
    lo, hi = SEVERITY_RANGE
    edges = np.cumsum(mix)
    out = []
    for k in range(n_cycles):
        c = min(int(np.searchsorted(edges, u[2 * k], side="right")), 2)
        label = LABELS[c]
        kind = "none" if label == "normal" else label
        fault = FaultMode(kind, 0.0 if kind == "none" else float(lo + (hi - lo) * u[2 * k + 1]))
        cfg = base.with_(seed=derive_seed(base.seed, device_index, k), device_id=device_id,
                         start_us=base.start_us + k * CYCLE_SPACING_US)
        out.append((f"{device_id}-{k:04d}", label, fault, cfg))
    return out


def run_devices(args, endpoint: tuple[str, int], notify_url: str) -> list[dict]:
    base = SimConfig(seed=args.seed, duration_scale=args.duration_scale, speedup=args.speedup,
                     fast_rate_hz=args.fast_rate)
    results: list[dict] = []
    errors: list[BaseException] = []
    lock = threading.Lock()

    def device(i: int):
        dev = f"wm-{i + 1:02d}"
        try:
            for cycle_id, label, fault, cfg in plan_device(dev, i, args.cycles_per_device,
                                                           args.fault_mix, base):
                sig = generate_cycle(fault=fault, config=cfg)
                rep = publish_cycle(sig, cfg, endpoint, notify_url, client_id=f"sim-{dev}",
                                    cycle_id=cycle_id)
                with lock:
                    results.append({"cycle_id": cycle_id, "device_id": dev, "label": label,
                                    "severity": fault.severity, "batches": rep.batches,
                                    "reconnects": rep.reconnects})
                print(f"{cycle_id}: published {rep.batches} batches ({label})", flush=True)
        except BaseException as exc:  # reported after all devices finish
            errors.append(exc)

    threads = [threading.Thread(target=device, args=(i,)) for i in range(args.devices)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return sorted(results, key=lambda r: r["cycle_id"])


def cmd_run(args) -> int:
    if args.endpoint is not None:
        notify = args.notify_url or f"http://{args.endpoint[0]}:8000"
        run_devices(args, args.endpoint, notify)
        return 0
    # no endpoint: bring up a local deployment and report predictions
    import tempfile

    from ..cluster import LocalCluster
    from ..monitor import ElasticityConfig

    root = Path(args.root) if args.root else Path(tempfile.mkdtemp(prefix="iotpipe-"))
    with LocalCluster(root, elasticity=ElasticityConfig(probe_period_s=1, cooldown_s=5)) as c:
        print(f"local deployment under {root}", flush=True)
        c.install_bootstrap_model(seed=args.seed)
        t0 = time.monotonic()
        results = run_devices(args, c.mqtt_endpoint, c.notify_url)
        states = c.wait_for([r["cycle_id"] for r in results], timeout=args.wait)
        for r in results:
            cid = r["cycle_id"]
            pred = "-"
            p = c.storage.prediction_path(cid)
            if p.exists():
                import json
                pred = json.loads(p.read_text())["label"]
            print(f"{cid}: truth={r['label']} status={states[cid]} predicted={pred}")
        print(f"done in {time.monotonic() - t0:.1f} s")
    return 0


def cmd_dataset(args) -> int:
    cfg = SimConfig(seed=args.seed, duration_scale=args.duration_scale, fast_rate_hz=args.fast_rate)
    cycles = make_dataset(args.n_per_class, cfg, args.out)
    counts = {lab: sum(c.label == lab for c in cycles) for lab in LABELS}
    print(f"wrote {len(cycles)} cycles to {args.out} {counts}")
    return 0


def build_parsers():
    run = argparse.ArgumentParser(prog="simulate", description=(
        "Publish simulated washing-machine cycles over MQTT and notify ingestion. "
        "Without --endpoint a local deployment is started. "
        "Use 'simulate dataset ...' to write a labelled dataset instead."))
    run.add_argument("--devices", type=int, default=1)
    run.add_argument("--cycles-per-device", type=int, default=1)
    run.add_argument("--fault-mix", type=parse_mix, default=parse_mix("1:1:1"),
                     help="relative weights normal:bearing:heating (default 1:1:1)")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--speedup", type=float, default=60.0, help="x real time, 0 = as fast as possible")
    run.add_argument("--endpoint", type=parse_endpoint, default=None, help="MQTT host:port")
    run.add_argument("--notify-url", default=None, help="ingest HTTP base URL (default host:8000)")
    run.add_argument("--duration-scale", type=float, default=1.0)
    run.add_argument("--fast-rate", type=int, default=2048)
    run.add_argument("--root", default=None, help="working directory for the local deployment")
    run.add_argument("--wait", type=float, default=600.0, help="seconds to wait for results")

    ds = argparse.ArgumentParser(prog="simulate dataset", description="Write a labelled cycle set.")
    ds.add_argument("--n-per-class", type=int, required=True)
    ds.add_argument("--seed", type=int, default=42)
    ds.add_argument("--out", required=True)
    ds.add_argument("--duration-scale", type=float, default=1.0)
    ds.add_argument("--fast-rate", type=int, default=2048)
    return run, ds


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run, ds = build_parsers()
    if argv and argv[0] == "dataset":
        args = ds.parse_args(argv[1:])
        if args.n_per_class < 1:
            ds.error("--n-per-class must be >= 1")
        return cmd_dataset(args)
    args = run.parse_args(argv)
    if args.devices < 1 or args.cycles_per_device < 1:
        run.error("--devices and --cycles-per-device must be >= 1")
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
