"""Utilisation probes: CPU-time deltas over a wall-clock window, per machine and per worker."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable

import psutil

MONITOR_QUEUE = "q.monitor"


@dataclass(frozen=True)
class UtilizationReport:
    machine_id: str
    worker_id: str | None
    stage_name: str | None
    cpu_fraction: float
    rss_bytes: int
    window_s: float
    sampled_at: int  # epoch µs

    def __post_init__(self):
        if not 0.0 <= self.cpu_fraction <= 1.0:
            raise ValueError(f"cpu_fraction {self.cpu_fraction} outside [0, 1]")
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")
        if self.rss_bytes < 0:
            raise ValueError("rss_bytes must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UtilizationReport":
        return cls(d["machine_id"], d.get("worker_id"), d.get("stage_name"),
                   float(d["cpu_fraction"]), int(d["rss_bytes"]), float(d["window_s"]),
                   int(d["sampled_at"]))


def _clip(x: float) -> float:
    return min(1.0, max(0.0, x))


def _machine_busy() -> tuple[float, float]:
    t = psutil.cpu_times()
    total = sum(t)
    idle = t.idle + getattr(t, "iowait", 0.0)
    return total - idle, total


class MachineProbe:
    """Samples one machine's node agent.

    Worker CPU comes from the thread CPU clock of in-process workers and from
    ``psutil`` for subprocess workers. In-process workers report the host
    process RSS, since threads share it.
    """

    def __init__(self, agent, broker=None, clock: Callable[[], float] = time.monotonic):
        self.agent = agent
        self.broker = broker
        self.clock = clock
        self._last_wall = clock()
        self._last_machine = _machine_busy()
        self._last_worker: dict[str, float] = {}
        self._proc = psutil.Process(os.getpid())
        if broker is not None:
            broker.declare_queue(MONITOR_QUEUE)

    @property
    def machine_id(self) -> str:
        return self.agent.machine.machine_id

    def _worker_cpu_seconds(self, handle) -> tuple[float, int]:
        pid = getattr(handle, "pid", None)
        if pid is not None:
            try:
                p = psutil.Process(pid)
                ct = p.cpu_times()
                return ct.user + ct.system, p.memory_info().rss
            except psutil.Error:
                return self._last_worker.get(handle.descriptor.worker_id, 0.0), 0
        return float(handle.cpu_seconds), self._proc.memory_info().rss

    def sample(self) -> list[UtilizationReport]:
        """One machine-level report plus one per live worker; also published
        to ``q.monitor`` when a broker is attached."""
        now_wall = self.clock()
        window = max(now_wall - self._last_wall, 1e-6)
        stamp = time.time_ns() // 1000
        busy, total = _machine_busy()
        d_busy, d_total = busy - self._last_machine[0], total - self._last_machine[1]
        machine_frac = _clip(d_busy / d_total) if d_total > 0 else 0.0
        reports = [UtilizationReport(self.machine_id, None, None, machine_frac,
                                     psutil.virtual_memory().used, window, stamp)]
        for desc in self.agent.live_workers():
            handle = self.agent.handles.get(desc.worker_id)
            if handle is None:
                continue
            cpu, rss = self._worker_cpu_seconds(handle)
            prev = self._last_worker.get(desc.worker_id)
            # a worker first seen mid-window is measured from its own start
            frac = _clip((cpu - prev) / window) if prev is not None else _clip(cpu / window)
            self._last_worker[desc.worker_id] = cpu
            reports.append(UtilizationReport(self.machine_id, desc.worker_id, desc.stage_name,
                                             frac, int(rss), window, stamp))
        self._last_wall, self._last_machine = now_wall, (busy, total)
        if self.broker is not None:
            for r in reports:
                self.broker.publish(MONITOR_QUEUE, r.to_json().encode("utf-8"))
        return reports
