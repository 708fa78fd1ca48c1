"""Per-machine node agent: hosts workers and serves spawn/stop/list over TCP."""

from __future__ import annotations

import json
import logging
import os
import signal
import socket
import socketserver
import subprocess
import sys
import threading
from pathlib import Path

from ..messaging import codec
from .registry import make_handler
from .spec import (
    MachineDescriptor,
    MachineUnavailable,
    PipelineError,
    StageSpec,
    UnknownHandler,
    UnknownWorker,
    WorkerDescriptor,
)
from .worker import StageWorker

log = logging.getLogger(__name__)


class SubprocessWorker:
    """A stage worker running ``python -m iotpipe.pipeline.worker``."""

    def __init__(self, descriptor: WorkerDescriptor, stage: StageSpec, broker_address: tuple,
                 context: dict, log_dir: str | None = None, python: str = sys.executable,
                 ready_timeout: float = 20.0):
        self.descriptor = descriptor
        self.stage = stage
        cmd = [python, "-m", "iotpipe.pipeline.worker",
               "--broker", f"{broker_address[0]}:{broker_address[1]}",
               "--stage", json.dumps(stage.__dict__),
               "--worker-id", descriptor.worker_id,
               "--machine-id", descriptor.machine_id,
               "--context", json.dumps(context)]
        if log_dir:
            cmd += ["--log-dir", str(log_dir)]
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[2])
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                     text=True, env=env)
        ready = threading.Event()

        def wait_ready():
            for line in self.proc.stdout:
                if line.strip() == "READY":
                    ready.set()
                    break
        threading.Thread(target=wait_ready, daemon=True).start()
        if not ready.wait(ready_timeout):
            self.proc.kill()
            descriptor.move("failed")
            raise PipelineError(f"worker {descriptor.worker_id} did not start")
        descriptor.move("running")

    @property
    def pid(self) -> int:
        return self.proc.pid

    def refresh(self) -> None:
        if self.descriptor.live and self.proc.poll() is not None:
            self.descriptor.move("failed" if self.proc.returncode else "stopped")

    def stop(self, graceful: bool = True, timeout: float = 30.0) -> None:
        d = self.descriptor
        if graceful:
            if d.state == "running":
                d.move("draining")
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        else:
            self.proc.kill()
            self.proc.wait()
        if d.live:
            d.move("stopped")


class NodeAgent:
    """Hosts the workers of one machine. Spawn and stop are serialised."""

    def __init__(self, machine: MachineDescriptor, broker, context: dict | None = None,
                 broker_address: tuple | None = None, error_log=None,
                 log_dir: str | Path | None = None):
        self.machine = machine
        self.broker = broker
        self.context = dict(context or {})
        self.broker_address = broker_address
        self.error_log = error_log
        self.log_dir = str(log_dir) if log_dir else None
        self.handles: dict[str, StageWorker | SubprocessWorker] = {}
        self._lock = threading.Lock()

    def _alert_fn(self, desc: WorkerDescriptor):
        if self.error_log is None:
            return None
        from ..monitor.alerts import AlertRecord

        def alert(severity, message, ctx):
            self.error_log.record(AlertRecord.now(self.machine.machine_id, desc.worker_id,
                                                  desc.stage_name, severity, message, ctx))
        return alert

    def spawn(self, stage: StageSpec, worker_id: str, kind: str = "in-process") -> WorkerDescriptor:
        with self._lock:
            if not self.machine.active:
                raise MachineUnavailable(self.machine.machine_id)
            desc = WorkerDescriptor(worker_id, stage.stage_name, self.machine.machine_id, kind=kind)
            if kind == "in-process":
                handler = make_handler(stage.handler_kind, self.context)
                w = StageWorker(desc, stage, handler, self.broker, self._alert_fn(desc))
                w.start()
            elif kind == "subprocess":
                if self.broker_address is None:
                    raise PipelineError("subprocess workers need a broker address")
                w = SubprocessWorker(desc, stage, self.broker_address, self.context, self.log_dir)
            else:
                raise PipelineError(f"unknown worker kind {kind!r}")
            self.handles[worker_id] = w
            return desc

    def stop(self, worker_id: str, graceful: bool = True) -> WorkerDescriptor:
        with self._lock:
            h = self.handles.get(worker_id)
            if h is None or not h.descriptor.live:
                raise UnknownWorker(worker_id)
            h.stop(graceful)
            return h.descriptor

    def list(self) -> list[WorkerDescriptor]:
        for h in self.handles.values():
            if isinstance(h, SubprocessWorker):
                h.refresh()
        return [h.descriptor for h in self.handles.values()]

    def live_workers(self) -> list[WorkerDescriptor]:
        return [d for d in self.list() if d.live]

    def shutdown(self, graceful: bool = True) -> None:
        for d in self.live_workers():
            try:
                self.stop(d.worker_id, graceful)
            except UnknownWorker:
                pass


# -- control endpoint ---------------------------------------------------------

class _ControlConnection(socketserver.BaseRequestHandler):
    def handle(self):
        agent: NodeAgent = self.server.agent
        while True:
            try:
                req = codec.read_frame(self.request)
            except (OSError, codec.FrameError):
                return
            if req is None:
                return
            try:
                reply = self._op(agent, req)
            except UnknownWorker as exc:
                reply = {"op": "error", "reason": "unknown-worker", "detail": str(exc)}
            except MachineUnavailable as exc:
                reply = {"op": "error", "reason": "machine-unavailable", "detail": str(exc)}
            except UnknownHandler as exc:
                reply = {"op": "error", "reason": "unknown-handler", "detail": str(exc)}
            except (PipelineError, KeyError, ValueError) as exc:
                reply = {"op": "error", "reason": "bad-request", "detail": str(exc)}
            self.request.sendall(codec.pack(reply))

    @staticmethod
    def _op(agent: NodeAgent, req: dict) -> dict:
        op = req.get("op")
        if op == "spawn":
            d = agent.spawn(StageSpec.from_dict(req["stage"]), req["worker_id"],
                            req.get("kind", "in-process"))
            return {"op": "ok", "worker": d.to_dict()}
        if op == "stop":
            d = agent.stop(req["worker_id"], bool(req.get("graceful", True)))
            return {"op": "ok", "worker": d.to_dict()}
        if op == "list":
            return {"op": "ok", "workers": [d.to_dict() for d in agent.list()]}
        raise ValueError(f"unknown op {op!r}")


class NodeAgentServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, agent: NodeAgent, host: str = "127.0.0.1", port: int = 0):
        self.agent = agent
        super().__init__((host, port), _ControlConnection)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "NodeAgentServer":
        threading.Thread(target=self.serve_forever, daemon=True, name="node-agent").start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


_REMOTE_ERRORS = {"unknown-worker": UnknownWorker, "machine-unavailable": MachineUnavailable,
                  "unknown-handler": UnknownHandler}


class RemoteNodeAgent:
    """Client for a :class:`NodeAgentServer`, with the agent's spawn/stop/list surface."""

    def __init__(self, machine: MachineDescriptor, host: str, port: int, timeout: float = 30.0):
        self.machine = machine
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._lock = threading.Lock()

    def _call(self, req: dict) -> dict:
        with self._lock:
            self.sock.sendall(codec.pack(req))
            reply = codec.read_frame(self.sock)
        if reply is None:
            raise ConnectionError("node agent closed the connection")
        if reply["op"] == "error":
            raise _REMOTE_ERRORS.get(reply["reason"], PipelineError)(reply.get("detail", ""))
        return reply

    def spawn(self, stage: StageSpec, worker_id: str, kind: str = "in-process") -> WorkerDescriptor:
        r = self._call({"op": "spawn", "stage": stage.__dict__, "worker_id": worker_id,
                        "kind": kind})
        return WorkerDescriptor.from_dict(r["worker"])

    def stop(self, worker_id: str, graceful: bool = True) -> WorkerDescriptor:
        r = self._call({"op": "stop", "worker_id": worker_id, "graceful": graceful})
        return WorkerDescriptor.from_dict(r["worker"])

    def list(self) -> list[WorkerDescriptor]:
        return [WorkerDescriptor.from_dict(d) for d in self._call({"op": "list"})["workers"]]

    def live_workers(self) -> list[WorkerDescriptor]:
        return [d for d in self.list() if d.live]

    def close(self) -> None:
        self.sock.close()
