"""Elasticity policy: a pure ``decide`` over utilisation and backlog, and ``apply``."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..messaging.broker import QueueStats
from ..pipeline.spec import MachineDescriptor, StageSpec
from .alerts import AlertRecord
from .probes import UtilizationReport

ACTIONS = ("activate", "deactivate")
REASONS = ("high-utilization", "backlog-growth", "low-utilization-idle")


@dataclass(frozen=True)
class ElasticityConfig:
    u_high: float = 0.8
    u_low: float = 0.2
    backlog_high: int = 100
    cooldown_s: float = 30.0
    probe_period_s: float = 5.0
    workers_per_core: int = 4

    def __post_init__(self):
        if not 0.0 <= self.u_low < self.u_high <= 1.0:
            raise ValueError("need 0 <= u_low < u_high <= 1")
        if self.cooldown_s < self.probe_period_s:
            raise ValueError("cooldown_s must be >= probe_period_s")
        if self.probe_period_s <= 0 or self.backlog_high < 0 or self.workers_per_core < 1:
            raise ValueError("probe_period_s, backlog_high and workers_per_core out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticityConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ElasticityConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ScalingDecision:
    stage_name: str
    action: str
    machine_id: str
    reason: str
    decided_at: float
    worker_id: str | None = None  # the victim, for deactivations

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingDecision":
        return cls(d["stage_name"], d["action"], d["machine_id"], d["reason"],
                   float(d["decided_at"]), d.get("worker_id"))


@dataclass
class ControllerState:
    """What the controller knows between rounds.

    ``placements`` maps worker_id to (stage_name, machine_id).
    """
    stages: list[StageSpec]
    machines: list[MachineDescriptor]
    placements: dict[str, tuple[str, str]] = field(default_factory=dict)
    last_decision: dict[str, float] = field(default_factory=dict)

    def workers_of(self, stage_name: str) -> list[str]:
        return sorted(w for w, (s, _) in self.placements.items() if s == stage_name)

    def load_of(self, machine_id: str) -> int:
        return sum(1 for _, m in self.placements.values() if m == machine_id)


def fresh_reports(reports: list[UtilizationReport], now: float, config: ElasticityConfig
                  ) -> list[UtilizationReport]:
    limit = 2.0 * config.probe_period_s
    return [r for r in reports if now - r.sampled_at / 1e6 <= limit]


def decide(reports: list[UtilizationReport], queue_stats: dict[str, QueueStats],
           state: ControllerState, config: ElasticityConfig, now: float) -> list[ScalingDecision]:
    """At most one scaling decision per stage, in pipeline order. Pure.

    ``now`` is in seconds on the same epoch as the reports' ``sampled_at`` (µs).
    """
    reports = fresh_reports(reports, now, config)
    worker_cpu: dict[str, float] = {}
    machine_cpu: dict[str, float] = {}
    # the newest report wins when several cover the same worker or machine
    for r in sorted(reports, key=lambda r: r.sampled_at):
        if r.worker_id is None:
            machine_cpu[r.machine_id] = r.cpu_fraction
        else:
            worker_cpu[r.worker_id] = r.cpu_fraction

    placements = dict(state.placements)
    out: list[ScalingDecision] = []
    for stage in state.stages:
        name = stage.stage_name
        workers = sorted(w for w, (s, _) in placements.items() if s == name)
        last = state.last_decision.get(name)
        if last is not None and now - last < config.cooldown_s:
            continue
        utils = [worker_cpu[w] for w in workers if w in worker_cpu]
        mean = sum(utils) / len(utils) if utils else None
        qs = queue_stats.get(stage.input_queue)
        depth = qs.depth if qs is not None else 0
        delta = qs.depth_delta if qs is not None else 0

        if len(workers) < stage.max_workers:
            reason = None
            if mean is not None and mean > config.u_high:
                reason = "high-utilization"
            elif depth > config.backlog_high and delta > 0:
                reason = "backlog-growth"
            if reason is not None:
                target = _target_machine(state.machines, placements, machine_cpu, config)
                if target is not None:
                    out.append(ScalingDecision(name, "activate", target, reason, now))
                    # reserve the slot so later stages see the machine's new load
                    placements[f"\x00pending-{name}"] = (name, target)
                    continue

        if (len(workers) > stage.min_workers and mean is not None and mean < config.u_low
                and depth == 0):
            victim = max(workers, key=lambda w: (machine_cpu.get(placements[w][1], -math.inf), w))
            out.append(ScalingDecision(name, "deactivate", placements[victim][1],
                                       "low-utilization-idle", now, victim))
            placements.pop(victim)
    return out


def _target_machine(machines: list[MachineDescriptor], placements: dict, machine_cpu: dict,
                    config: ElasticityConfig) -> str | None:
    candidates = []
    for m in machines:
        if not m.active:
            continue
        load = sum(1 for _, mid in placements.values() if mid == m.machine_id)
        if load >= m.core_count * config.workers_per_core:
            continue
        candidates.append((machine_cpu.get(m.machine_id, math.inf), m.machine_id))
    return min(candidates)[1] if candidates else None


class ScalingHistory:
    """Newline-delimited JSON log of applied decisions."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[ScalingDecision] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, d: ScalingDecision) -> None:
        self.entries.append(d)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(d.to_json() + "\n")

    @staticmethod
    def read(path: str | Path) -> list[ScalingDecision]:
        with open(path, encoding="utf-8") as fh:
            return [ScalingDecision.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class ApplyResult:
    decision: ScalingDecision
    ok: bool
    worker_id: str | None = None
    error: str | None = None


def apply(decisions: list[ScalingDecision], state: ControllerState, actuator,
          history: ScalingHistory | None = None, error_log=None,
          controller_machine: str = "controller") -> list[ApplyResult]:
    """Carry out decisions through ``actuator.spawn_worker`` / ``stop_worker``.

    A failed action is logged as an ERROR alert and leaves the state as it
    was, so the same decision is eligible again next round.
    """
    results = []
    for d in decisions:
        try:
            if d.action == "activate":
                desc = actuator.spawn_worker(d.stage_name, d.machine_id)
                state.placements[desc.worker_id] = (d.stage_name, d.machine_id)
                wid = desc.worker_id
            elif d.action == "deactivate":
                actuator.stop_worker(d.worker_id, graceful=True)
                state.placements.pop(d.worker_id, None)
                wid = d.worker_id
            else:
                raise ValueError(f"unknown action {d.action!r}")
        except Exception as exc:
            if error_log is not None:
                error_log.record(AlertRecord.now(
                    controller_machine, d.worker_id, d.stage_name, "ERROR",
                    f"{d.action} on {d.machine_id} failed: {exc}",
                    {"action": d.action, "machine_id": d.machine_id}))
            results.append(ApplyResult(d, False, error=str(exc)))
            continue
        state.last_decision[d.stage_name] = d.decided_at
        if history is not None:
            history.append(d)
        results.append(ApplyResult(d, True, wid))
    return results
