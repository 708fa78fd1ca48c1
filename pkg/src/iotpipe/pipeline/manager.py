"""Central pipeline registry: stage queues, machines and worker placement."""

from __future__ import annotations

import itertools
import threading
from pathlib import Path

from .node import NodeAgent
from .registry import is_known
from .spec import (
    AtMaxWorkers,
    MachineDescriptor,
    MachineUnavailable,
    PipelineSpec,
    UnknownHandler,
    UnknownStage,
    UnknownWorker,
    WorkerDescriptor,
)


class PipelineManager:
    """Owns the registered pipeline and the node agents of every machine.

    ``context`` is handed to every handler factory (storage root, ingest URL
    and similar runtime settings).
    """

    def __init__(self, broker, context: dict | None = None, spec_dir: str | Path | None = None,
                 error_log=None, broker_address: tuple | None = None,
                 log_dir: str | Path | None = None):
        self.broker = broker
        self.context = dict(context or {})
        self.spec_dir = Path(spec_dir) if spec_dir else None
        self.error_log = error_log
        self.broker_address = broker_address
        self.log_dir = log_dir
        self.spec: PipelineSpec | None = None
        self.machines: dict[str, MachineDescriptor] = {}
        self.agents: dict[str, object] = {}
        self._placement: dict[str, str] = {}  # worker_id -> machine_id
        self._seq = itertools.count(1)
        self._lock = threading.RLock()

    # -- setup ------------------------------------------------------------

    def add_machine(self, machine: MachineDescriptor, agent=None) -> MachineDescriptor:
        with self._lock:
            if machine.machine_id in self.machines:
                raise ValueError(f"machine {machine.machine_id} already added")
            if agent is None:
                agent = NodeAgent(machine, self.broker, self.context, self.broker_address,
                                  self.error_log, self.log_dir)
            self.machines[machine.machine_id] = machine
            self.agents[machine.machine_id] = agent
            return machine

    def register_pipeline(self, spec: PipelineSpec) -> dict:
        spec.validate()
        for s in spec.stages:
            if not is_known(s.handler_kind):
                raise UnknownHandler(s.handler_kind)
        for q in spec.queues():
            self.broker.declare_queue(q)
        with self._lock:
            self.spec = spec
        if self.spec_dir is not None:
            spec.save(self.spec_dir / f"{spec.pipeline_name}.json")
        return {"pipeline_name": spec.pipeline_name, "queues": spec.queues()}

    # -- workers ----------------------------------------------------------

    def _stage(self, stage_name: str):
        if self.spec is None:
            raise UnknownStage(stage_name)
        return self.spec.stage(stage_name)

    def workers(self, stage_name: str | None = None) -> list[WorkerDescriptor]:
        """Live workers, optionally of one stage."""
        out = []
        for agent in self.agents.values():
            out += [d for d in agent.live_workers()
                    if stage_name is None or d.stage_name == stage_name]
        return sorted(out, key=lambda d: d.worker_id)

    def worker_count(self, stage_name: str) -> int:
        return len(self.workers(stage_name))

    def spawn_worker(self, stage_name: str, machine_id: str, kind: str = "in-process"
                     ) -> WorkerDescriptor:
        with self._lock:
            stage = self._stage(stage_name)
            machine = self.machines.get(machine_id)
            if machine is None or not machine.active:
                raise MachineUnavailable(machine_id)
            if self.worker_count(stage_name) >= stage.max_workers:
                raise AtMaxWorkers(f"{stage_name} already has {stage.max_workers} workers")
            worker_id = f"{stage_name}-{machine_id}-{next(self._seq):04d}"
            desc = self.agents[machine_id].spawn(stage, worker_id, kind)
            self._placement[worker_id] = machine_id
            return desc

    def stop_worker(self, worker_id: str, graceful: bool = True) -> WorkerDescriptor:
        with self._lock:
            machine_id = self._placement.get(worker_id)
            if machine_id is None:
                raise UnknownWorker(worker_id)
            return self.agents[machine_id].stop(worker_id, graceful)

    def machine_of(self, worker_id: str) -> str:
        return self._placement[worker_id]

    def ensure_min_workers(self, kind: str = "in-process") -> list[WorkerDescriptor]:
        """Bring every stage up to its minimum, placing round-robin over active machines."""
        started = []
        active = sorted(m for m, d in self.machines.items() if d.active)
        if not active or self.spec is None:
            return started
        rr = itertools.cycle(active)
        for stage in self.spec.stages:
            while self.worker_count(stage.stage_name) < stage.min_workers:
                started.append(self.spawn_worker(stage.stage_name, next(rr), kind))
        return started

    def shutdown(self, graceful: bool = True) -> None:
        for agent in self.agents.values():
            if hasattr(agent, "shutdown"):
                agent.shutdown(graceful)
