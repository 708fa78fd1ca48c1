"""Central elasticity loop: drains ``q.monitor``, reads queue stats, decides and applies."""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Callable

from ..pipeline.spec import UnknownWorker
from .alerts import AlertRecord
from .elasticity import (
    ApplyResult,
    ControllerState,
    ElasticityConfig,
    ScalingHistory,
    apply,
    decide,
)
from .probes import MONITOR_QUEUE, MachineProbe, UtilizationReport

log = logging.getLogger(__name__)


class ManagerActuator:
    """Adapts a :class:`PipelineManager` to the actuator interface of ``apply``."""

    def __init__(self, manager):
        self.manager = manager

    def spawn_worker(self, stage_name: str, machine_id: str):
        return self.manager.spawn_worker(stage_name, machine_id)

    def stop_worker(self, worker_id: str, graceful: bool = True):
        return self.manager.stop_worker(worker_id, graceful)


class ElasticityController:
    """Single sequential decision loop; the only writer of its ``state``.

    ``step`` is one round and can be driven directly (tests) or by ``start``,
    which also samples each machine's probe every ``probe_period_s``.
    """

    def __init__(self, manager, config: ElasticityConfig | None = None,
                 history: ScalingHistory | None = None, error_log=None,
                 clock: Callable[[], float] = time.time, probes: list[MachineProbe] | None = None):
        self.manager = manager
        self.broker = manager.broker
        self.config = config or ElasticityConfig()
        self.history = history or ScalingHistory()
        self.error_log = error_log
        self.clock = clock
        self.probes = probes if probes is not None else [
            MachineProbe(agent, self.broker) for agent in manager.agents.values()]
        self.broker.declare_queue(MONITOR_QUEUE)
        self._sub = self.broker.consume(MONITOR_QUEUE, prefetch=10_000,
                                        consumer_id="elasticity-controller")
        self.state = ControllerState(list(manager.spec.stages), list(manager.machines.values()))
        self._reports: dict[tuple, UtilizationReport] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _drain_reports(self) -> None:
        while True:
            msg = self._sub.get(timeout=0)
            if msg is None:
                break
            self._sub.ack(msg.msg_id)
            try:
                r = UtilizationReport.from_dict(json.loads(msg.payload))
            except (ValueError, KeyError) as exc:
                log.warning("dropping bad utilisation report: %s", exc)
                continue
            self._reports[(r.machine_id, r.worker_id)] = r

    def _sync_placements(self) -> None:
        # workers can also disappear on their own (crash); the manager is the source of truth
        self.state.machines = list(self.manager.machines.values())
        self.state.placements = {d.worker_id: (d.stage_name, d.machine_id)
                                 for d in self.manager.workers()}
        live = set(self.state.placements)
        self._reports = {k: r for k, r in self._reports.items() if k[1] is None or k[1] in live}

    def step(self, now: float | None = None) -> list[ApplyResult]:
        now = self.clock() if now is None else now
        self._drain_reports()
        self._sync_placements()
        stats = {s.input_queue: self.broker.queue_stats(s.input_queue) for s in self.state.stages}
        decisions = decide(list(self._reports.values()), stats, self.state, self.config, now)
        return apply(decisions, self.state, ManagerActuator(self.manager), self.history,
                     self.error_log)

    def sample_all(self) -> None:
        for p in self.probes:
            try:
                p.sample()
            except Exception as exc:
                if self.error_log is not None:
                    self.error_log.record(AlertRecord.now(p.machine_id, None, None, "WARN",
                                                          f"utilisation sampling failed: {exc}"))

    def run(self) -> None:
        period = self.config.probe_period_s
        while not self._stop.wait(period):
            self.sample_all()
            try:
                self.step()
            except UnknownWorker as exc:  # raced with a worker exit; next round resyncs
                log.info("controller round skipped: %s", exc)

    def start(self) -> "ElasticityController":
        self._thread = threading.Thread(target=self.run, daemon=True, name="elasticity")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sub.cancel()
