"""Alert records, the per-machine error log and the ``q.alerts`` feed."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

SEVERITIES = ("INFO", "WARN", "ERROR", "FATAL")
ALERT_QUEUE = "q.alerts"


def severity_rank(severity: str) -> int:
    return SEVERITIES.index(severity)


@dataclass
class AlertRecord:
    sampled_at: int
    machine_id: str
    worker_id: str | None
    stage_name: str | None
    severity: str
    message: str
    context: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        self.context = {str(k): str(v) for k, v in self.context.items()}

    @classmethod
    def now(cls, machine_id: str, worker_id: str | None, stage_name: str | None,
            severity: str, message: str, context: dict | None = None) -> "AlertRecord":
        return cls(time.time_ns() // 1000, machine_id, worker_id, stage_name, severity, message,
                   dict(context or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AlertRecord":
        return cls(int(d["sampled_at"]), d["machine_id"], d.get("worker_id"), d.get("stage_name"),
                   d["severity"], d["message"], dict(d.get("context", {})))


class ErrorLog:
    """Appends alerts to ``<log_dir>/monitor-<machine_id>.log`` as JSON lines;
    records of severity ERROR and above are also published to ``q.alerts``."""

    def __init__(self, log_dir: str | Path, machine_id: str, broker=None):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.machine_id = machine_id
        self.broker = broker
        self._lock = threading.Lock()
        if broker is not None:
            broker.declare_queue(ALERT_QUEUE)

    @property
    def path(self) -> Path:
        return self.log_dir / f"monitor-{self.machine_id}.log"

    def path_for(self, machine_id: str) -> Path:
        return self.log_dir / f"monitor-{machine_id}.log"

    def record(self, rec: AlertRecord) -> None:
        line = rec.to_json() + "\n"
        with self._lock:
            with open(self.path_for(rec.machine_id), "a", encoding="utf-8") as fh:
                fh.write(line)
        if self.broker is not None and severity_rank(rec.severity) >= severity_rank("ERROR"):
            self.broker.publish(ALERT_QUEUE, line.encode("utf-8"), {"severity": rec.severity})

    def read(self, machine_id: str | None = None) -> list[AlertRecord]:
        path = self.path_for(machine_id or self.machine_id)
        if not path.exists():
            return []
        with open(path, encoding="utf-8") as fh:
            return [AlertRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
