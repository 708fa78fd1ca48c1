"""Pipeline, stage, worker and machine descriptors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class PipelineError(Exception):
    pass


class BrokenChain(PipelineError):
    pass


class DuplicateStage(PipelineError):
    pass


class UnknownHandler(PipelineError):
    pass


class UnknownStage(PipelineError):
    pass


class AtMaxWorkers(PipelineError):
    pass


class MachineUnavailable(PipelineError):
    pass


class UnknownWorker(PipelineError):
    pass


@dataclass(frozen=True)
class StageSpec:
    stage_name: str
    input_queue: str
    output_queue: str | None
    handler_kind: str
    min_workers: int = 1
    max_workers: int = 1
    prefetch: int = 1

    def __post_init__(self):
        if not self.stage_name:
            raise PipelineError("stage_name is required")
        if self.min_workers < 1 or self.max_workers < 1 or self.prefetch < 1:
            raise PipelineError(f"{self.stage_name}: worker bounds and prefetch must be positive")
        if self.min_workers > self.max_workers:
            raise PipelineError(f"{self.stage_name}: min_workers > max_workers")
        if self.input_queue == self.output_queue:
            raise BrokenChain(f"{self.stage_name}: input and output queue are the same")

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return cls(d["stage_name"], d["input_queue"], d.get("output_queue"), d["handler_kind"],
                   int(d.get("min_workers", 1)), int(d.get("max_workers", 1)),
                   int(d.get("prefetch", 1)))


@dataclass(frozen=True)
class PipelineSpec:
    pipeline_name: str
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def validate(self) -> None:
        if not self.stages:
            raise PipelineError("pipeline has no stages")
        names = [s.stage_name for s in self.stages]
        if len(set(names)) != len(names):
            raise DuplicateStage(f"duplicate stage names in {names}")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.output_queue != b.input_queue:
                raise BrokenChain(f"{a.stage_name} -> {a.output_queue!r} but "
                                  f"{b.stage_name} reads {b.input_queue!r}")
        queues = [self.stages[0].input_queue] + [s.output_queue for s in self.stages]
        if self.stages[-1].output_queue is None:
            queues = queues[:-1]
        if len(set(queues)) != len(queues):
            raise BrokenChain("pipeline queues form a cycle")

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.stage_name == name:
                return s
        raise UnknownStage(name)

    def queues(self) -> list[str]:
        out = []
        for s in self.stages:
            for q in (s.input_queue, s.output_queue):
                if q is not None and q not in out:
                    out.append(q)
        return out

    def to_dict(self) -> dict:
        return {"pipeline_name": self.pipeline_name, "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        return cls(d["pipeline_name"], tuple(StageSpec.from_dict(s) for s in d["stages"]))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PipelineSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


WORKER_STATES = ("starting", "running", "draining", "stopped", "failed")
_NEXT_STATE = {
    "starting": {"running", "failed", "stopped"},
    "running": {"draining", "stopped", "failed"},
    "draining": {"stopped", "failed"},
    "stopped": set(),
    "failed": set(),
}


@dataclass
class WorkerDescriptor:
    worker_id: str
    stage_name: str
    machine_id: str
    state: str = "starting"
    kind: str = "in-process"

    def move(self, state: str) -> None:
        if state not in _NEXT_STATE[self.state]:
            raise PipelineError(f"worker {self.worker_id}: {self.state} -> {state} not allowed")
        self.state = state

    @property
    def live(self) -> bool:
        return self.state in ("starting", "running", "draining")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkerDescriptor":
        return cls(d["worker_id"], d["stage_name"], d["machine_id"], d["state"], d["kind"])


@dataclass
class MachineDescriptor:
    machine_id: str
    address: str = "127.0.0.1"
    core_count: int = 1
    active: bool = True
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MachineDescriptor":
        return cls(d["machine_id"], d.get("address", "127.0.0.1"), int(d.get("core_count", 1)),
                   bool(d.get("active", True)), dict(d.get("meta", {})))


def smart_pdm_spec(max_workers: int = 4) -> PipelineSpec:
    """The four-stage maintenance pipeline: download, clean, feature, classify."""
    names = ("download", "clean", "feature", "classify")
    queues = [f"q.{n}" for n in names] + [None]
    return PipelineSpec("smart-pdm", tuple(
        StageSpec(n, queues[i], queues[i + 1], f"pdm.{n}", 1, max_workers, 1)
        for i, n in enumerate(names)))
