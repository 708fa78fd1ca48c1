"""A whole deployment in one process: broker, ingest, storage, the maintenance
pipeline, node agents and (optionally) the elasticity controller."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from .api import ApiServer, ManagerStatus
from .ingest import IngestHttpServer, MqttServer, RawStore
from .messaging.broker import Broker
from .messaging.server import BrokerServer
from .monitor import ElasticityConfig, ElasticityController, ErrorLog, ScalingHistory
from .pdm import handlers, train
from .pdm.training import featurize_signals
from .pipeline import MachineDescriptor, PipelineManager, smart_pdm_spec
from .simulator import FaultMode, SimConfig, generate_cycle
from .storage import Storage

log = logging.getLogger(__name__)

TERMINAL = ("classified", "failed")


class LocalCluster:
    """Everything bound to 127.0.0.1 on ephemeral ports unless given.

    Layout under ``root``: ``raw/`` (ingest store), ``store/`` (cycle storage),
    ``logs/`` (alerts, scaling history, worker logs), ``specs/``.
    """

    def __init__(self, root: str | Path, n_machines: int = 1, cores_per_machine: int = 4,
                 max_workers: int = 4, elasticity: ElasticityConfig | None = None,
                 mqtt_port: int = 0, http_port: int = 0, broker_port: int | None = None,
                 api_port: int | None = None):
        self.root = Path(root)
        self.broker = Broker()
        self.raw = RawStore(self.root / "raw")
        self.storage = Storage(self.root / "store")
        self.mqtt = MqttServer(self.raw, port=mqtt_port).start()
        self.ingest = IngestHttpServer(self.raw, lambda: self.broker, port=http_port).start()
        self.broker_server = (BrokerServer(self.broker, port=broker_port).start()
                              if broker_port is not None else None)
        log_dir = self.root / "logs"
        self.error_log = ErrorLog(log_dir, "controller", self.broker)
        context = {"storage_root": str(self.storage.root), "ingest_url": self.ingest.base_url}
        self.manager = PipelineManager(
            self.broker, context, self.root / "specs", self.error_log,
            self.broker_server.address if self.broker_server else None, log_dir)
        for i in range(n_machines):
            self.manager.add_machine(MachineDescriptor(f"m{i + 1}", "127.0.0.1", cores_per_machine))
        self.manager.register_pipeline(smart_pdm_spec(max_workers))
        self.manager.ensure_min_workers()
        self.history = ScalingHistory(log_dir / "scaling-history.jsonl")
        self.controller: ElasticityController | None = None
        if elasticity is not None:
            self.controller = ElasticityController(self.manager, elasticity, self.history,
                                                   self.error_log).start()
        self.api: ApiServer | None = None
        if api_port is not None:
            self.api = ApiServer(self.storage, ManagerStatus(self.manager, self.history),
                                 port=api_port).start()

    @property
    def mqtt_endpoint(self) -> tuple[str, int]:
        return self.mqtt.address

    @property
    def notify_url(self) -> str:
        return self.ingest.base_url

    def install_model(self, model) -> Path:
        return handlers.install_model(self.storage, model)

    def install_bootstrap_model(self, seed: int = 0, per_class: int = 2,
                                duration_scale: float = 0.05, kind: str = "rf") -> Path:
        """Train a small model on freshly simulated cycles so classification can run."""
        X, y = [], []
        for c, (label, fault) in enumerate([("normal", FaultMode("none", 0.0)),
                                            ("bearing_fault", FaultMode("bearing_fault", 0.7)),
                                            ("heating_fault", FaultMode("heating_fault", 0.7))]):
            for i in range(per_class):
                cfg = SimConfig(seed=seed * 1000 + c * 100 + i, duration_scale=duration_scale)
                X.append(featurize_signals(f"boot-{label}-{i}", generate_cycle(fault=fault,
                                                                              config=cfg)).values)
                y.append(label)
        return self.install_model(train(kind, np.vstack(X), y))

    def status(self, cycle_id: str) -> str | None:
        try:
            return self.storage.load_manifest(cycle_id).status
        except Exception:
            return None

    def wait_for(self, cycle_ids, timeout: float = 60.0, poll: float = 0.02) -> dict[str, str | None]:
        """Block until every cycle is classified or failed, or the timeout passes."""
        deadline = time.monotonic() + timeout
        ids = list(cycle_ids)
        while True:
            states = {c: self.status(c) for c in ids}
            if all(s in TERMINAL for s in states.values()) or time.monotonic() > deadline:
                return states
            time.sleep(poll)

    def close(self) -> None:
        if self.api is not None:
            self.api.stop()
        if self.controller is not None:
            self.controller.stop()
        self.manager.shutdown(graceful=False)
        self.ingest.stop()
        self.mqtt.stop()
        if self.broker_server is not None:
            self.broker_server.stop()
        self.broker.close()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
