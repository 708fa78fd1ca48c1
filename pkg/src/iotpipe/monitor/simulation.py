"""Simulated-clock elasticity run: a real broker and the real decide/apply pair,
with workers whose handler cost is a fixed service time."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..messaging.broker import Broker
from ..pipeline.spec import MachineDescriptor, StageSpec, WorkerDescriptor
from .elasticity import ControllerState, ElasticityConfig, ScalingDecision, ScalingHistory, apply, decide
from .probes import UtilizationReport


class _SimWorker:
    def __init__(self, desc: WorkerDescriptor, broker: Broker, queue: str, prefetch: int):
        self.desc = desc
        self.sub = broker.consume(queue, prefetch=prefetch, consumer_id=desc.worker_id)
        self.current = None
        self.done_at_ms = 0
        self.busy_ms = 0
        self.reported_busy_ms = 0
        self.processed = 0
        self.draining = False

    def advance(self, now_ms: int, service_ms: int) -> None:
        """Finish work due by ``now_ms`` and pick up the next message back to back."""
        start_ms = now_ms
        while True:
            if self.current is not None:
                if self.done_at_ms > now_ms:
                    return
                self.sub.ack(self.current.msg_id)
                self.processed += 1
                self.current = None
                start_ms = self.done_at_ms
            if self.draining:
                return
            msg = self.sub.get(timeout=0)
            if msg is None:
                return
            self.current = msg
            self.done_at_ms = start_ms + service_ms
            self.busy_ms += service_ms


class SimCluster:
    """Actuator over simulated workers on simulated machines."""

    def __init__(self, broker: Broker, stage: StageSpec, service_ms: int):
        self.broker = broker
        self.stage = stage
        self.service_ms = service_ms
        self.workers: dict[str, _SimWorker] = {}
        self._seq = 0
        self.down: set[str] = set()

    def live(self) -> list[_SimWorker]:
        return [w for w in self.workers.values() if w.desc.live]

    def spawn_worker(self, stage_name: str, machine_id: str) -> WorkerDescriptor:
        if machine_id in self.down:
            raise ConnectionError(f"machine {machine_id} unreachable")
        if len(self.live()) >= self.stage.max_workers:
            raise RuntimeError("at max workers")
        self._seq += 1
        desc = WorkerDescriptor(f"{stage_name}-{machine_id}-{self._seq:04d}", stage_name, machine_id)
        desc.move("running")
        self.workers[desc.worker_id] = _SimWorker(desc, self.broker, self.stage.input_queue,
                                                  self.stage.prefetch)
        return desc

    def stop_worker(self, worker_id: str, graceful: bool = True) -> WorkerDescriptor:
        w = self.workers[worker_id]
        w.desc.move("draining")
        w.draining = True
        return w.desc

    def reap(self, now_ms: int) -> None:
        """Drained workers whose in-flight message is done leave the consumer set."""
        for w in self.live():
            if w.draining and w.current is None:
                w.sub.cancel()
                w.desc.move("stopped")


@dataclass
class SimResult:
    trace: list[tuple[float, int]] = field(default_factory=list)  # (t, live workers) each tick
    decisions: list[ScalingDecision] = field(default_factory=list)
    drained_at: float | None = None
    processed: int = 0
    acked: int = 0
    dead_lettered: int = 0

    def first_time_at(self, count: int, after: float = 0.0) -> float | None:
        for t, n in self.trace:
            if t >= after and n == count:
                return t
        return None

    @property
    def min_count(self) -> int:
        return min(n for _, n in self.trace)

    @property
    def max_count(self) -> int:
        return max(n for _, n in self.trace)


def simulate_burst(n_messages: int = 500, service_s: float = 0.05, min_workers: int = 1,
                   max_workers: int = 4, config: ElasticityConfig | None = None,
                   machines: list[MachineDescriptor] | None = None, tick_s: float = 0.01,
                   horizon_s: float = 60.0, history_path=None) -> SimResult:
    """Publish a burst at t=0 to one stage and run the controller on a simulated clock.

    Probes fire every ``probe_period_s``; each worker's cpu_fraction is its busy
    time in the last window over the window, and a machine's is its workers'
    busy time over its cores.
    """
    config = config or ElasticityConfig(probe_period_s=1.0, cooldown_s=2.0)
    machines = machines or [MachineDescriptor("m1", "sim", core_count=4)]
    clock_ms = [0]
    broker = Broker(clock=lambda: clock_ms[0] / 1000.0)
    stage = StageSpec("clean", "q.clean", None, "sleep", min_workers, max_workers)
    broker.declare_queue(stage.input_queue)
    cluster = SimCluster(broker, stage, round(service_s * 1000))
    state = ControllerState([stage], machines)
    history = ScalingHistory(history_path)
    for i in range(min_workers):
        m = machines[i % len(machines)].machine_id
        d = cluster.spawn_worker(stage.stage_name, m)
        state.placements[d.worker_id] = (stage.stage_name, m)

    for i in range(n_messages):
        broker.publish(stage.input_queue, json.dumps({"cycle_id": f"burst-{i:05d}"}).encode())

    tick_ms = round(tick_s * 1000)
    probe_ms = round(config.probe_period_s * 1000)
    result = SimResult()
    reports: list[UtilizationReport] = []
    last_probe_ms = 0
    while clock_ms[0] <= round(horizon_s * 1000):
        now_ms = clock_ms[0]
        for w in cluster.live():
            w.advance(now_ms, cluster.service_ms)
        cluster.reap(now_ms)
        for w in cluster.live():
            w.advance(now_ms, cluster.service_ms)

        if now_ms == 0 or now_ms - last_probe_ms >= probe_ms:
            window_ms = max(now_ms - last_probe_ms, tick_ms)
            reports = _probe(cluster, machines, now_ms, window_ms)
            last_probe_ms = now_ms
            state.placements = {w.desc.worker_id: (w.desc.stage_name, w.desc.machine_id)
                                for w in cluster.live() if not w.draining}
            stats = {stage.input_queue: broker.queue_stats(stage.input_queue)}
            decisions = decide(reports, stats, state, config, now_ms / 1000.0)
            for r in apply(decisions, state, cluster, history):
                if r.ok:
                    result.decisions.append(r.decision)
            # a fresh worker starts consuming in the same tick
            for w in cluster.live():
                w.advance(now_ms, cluster.service_ms)

        c = broker.counters(stage.input_queue)
        if result.drained_at is None and c["queued"] == 0 and c["in_flight"] == 0 \
                and c["acked"] + c["dead_lettered"] == n_messages:
            result.drained_at = now_ms / 1000.0
        result.trace.append((now_ms / 1000.0, sum(1 for w in cluster.live() if not w.draining)))
        clock_ms[0] += tick_ms

    c = broker.counters(stage.input_queue)
    result.acked, result.dead_lettered = c["acked"], c["dead_lettered"]
    result.processed = sum(w.processed for w in cluster.workers.values())
    return result


def _probe(cluster: SimCluster, machines: list[MachineDescriptor], now_ms: int,
           window_ms: int) -> list[UtilizationReport]:
    stamp = now_ms * 1000
    window_s = window_ms / 1000.0
    per_machine = {m.machine_id: 0 for m in machines}
    out = []
    for w in cluster.live():
        # only work already performed in the window counts as busy
        in_progress = max(0, w.done_at_ms - now_ms) if w.current is not None else 0
        done = w.busy_ms - in_progress
        busy = done - w.reported_busy_ms
        w.reported_busy_ms = done
        per_machine[w.desc.machine_id] += busy
        out.append(UtilizationReport(w.desc.machine_id, w.desc.worker_id, w.desc.stage_name,
                                     min(1.0, busy / window_ms), 0, window_s, stamp))
    for m in machines:
        frac = min(1.0, per_machine[m.machine_id] / (window_ms * m.core_count))
        out.append(UtilizationReport(m.machine_id, None, None, frac, 0, window_s, stamp))
    return out
