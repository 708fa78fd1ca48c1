"""The stage loop: consume, handle, publish, ack, with retry and dead-lettering.

Run as ``python -m iotpipe.pipeline.worker`` to host one worker in its own
process, connected to a broker over TCP.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from typing import Callable

from ..messaging.broker import BrokerError, Message
from .registry import Handler, make_handler
from .spec import StageSpec, WorkerDescriptor

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
AlertFn = Callable[[str, str, dict], None]


class StageWorker:
    """One sequential consumer of a stage's input queue.

    ``alert(severity, message, context)`` receives handler failures: WARN for
    a retried attempt, ERROR when the message is dead-lettered.
    """

    def __init__(self, descriptor: WorkerDescriptor, stage: StageSpec, handler: Handler,
                 broker, alert: AlertFn | None = None, poll_s: float = 0.05):
        self.descriptor = descriptor
        self.stage = stage
        self.handler = handler
        self.broker = broker
        self.alert = alert
        self.poll_s = poll_s
        self.processed = 0
        self.failures = 0
        self.dead_lettered = 0
        self.cpu_seconds = 0.0
        self._stop = threading.Event()
        self._killed = False
        self._sub = None
        self._thread: threading.Thread | None = None
        self._started = threading.Event()

    @property
    def worker_id(self) -> str:
        return self.descriptor.worker_id

    def _emit(self, severity: str, message: str, msg: Message) -> None:
        if self.alert is None:
            return
        ctx = {"queue": msg.queue, "msg_id": msg.msg_id,
               "delivery_count": str(msg.delivery_count)}
        try:
            self.alert(severity, message, ctx)
        except Exception:  # alerting must never take the worker down
            log.exception("alert sink failed")

    def process(self, msg: Message) -> None:
        sub = self._sub
        try:
            out = self.handler(msg.payload)
        except Exception as exc:
            self.failures += 1
            if self._killed:
                return
            reason = f"{type(exc).__name__}: {exc}"
            if msg.delivery_count < MAX_ATTEMPTS:
                self._emit("WARN", f"attempt {msg.delivery_count} failed: {reason}", msg)
                sub.nack(msg.msg_id, requeue=True)
            else:
                self.dead_lettered += 1
                self._emit("ERROR", f"dead-lettered after {msg.delivery_count} attempts: {reason}", msg)
                sub.nack(msg.msg_id, requeue=False)
            return
        if self._killed:
            return
        if out is not None and self.stage.output_queue is not None:
            self.broker.publish(self.stage.output_queue, out, dict(msg.headers))
        sub.ack(msg.msg_id)
        self.processed += 1

    def run(self) -> None:
        d = self.descriptor
        self._sub = self.broker.consume(self.stage.input_queue, self.stage.prefetch,
                                        consumer_id=d.worker_id)
        if d.state == "starting":
            d.move("running")
        self._started.set()
        try:
            while not self._stop.is_set():
                msg = self._sub.get(timeout=self.poll_s)
                self.cpu_seconds = time.thread_time()
                if msg is None:
                    continue
                try:
                    self.process(msg)
                except BrokerError:
                    if not self._killed:
                        raise
                self.cpu_seconds = time.thread_time()
        except Exception as exc:
            log.exception("worker %s crashed", d.worker_id)
            if self.alert is not None:
                self.alert("FATAL", f"worker crashed: {exc}", {"queue": self.stage.input_queue})
            if d.live:
                d.move("failed")
        finally:
            if not self._killed:
                self._sub.cancel()
            if d.live:
                d.move("stopped")

    def start(self) -> "StageWorker":
        self._thread = threading.Thread(target=self.run, daemon=True, name=self.worker_id)
        self._thread.start()
        self._started.wait(5.0)
        return self

    def stop(self, graceful: bool = True, timeout: float | None = 30.0) -> None:
        """Graceful: finish the message in hand, then stop. Otherwise drop the
        consumer at once so the broker redelivers whatever it held."""
        d = self.descriptor
        if graceful:
            if d.state == "running":
                d.move("draining")
            self._stop.set()
            if self._thread is not None and self._thread is not threading.current_thread():
                self._thread.join(timeout)
        else:
            self._killed = True
            self._stop.set()
            if self._sub is not None:
                self._sub.cancel()
            if d.live:
                d.move("stopped")

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)


# -- subprocess entry point ---------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    from ..messaging.server import BrokerClient
    from ..monitor.alerts import AlertRecord, ErrorLog

    ap = argparse.ArgumentParser(description="Run one pipeline stage worker.")
    ap.add_argument("--broker", required=True, help="host:port of the broker")
    ap.add_argument("--stage", required=True, help="StageSpec as JSON")
    ap.add_argument("--worker-id", required=True)
    ap.add_argument("--machine-id", default="local")
    ap.add_argument("--context", default="{}", help="handler context as JSON")
    ap.add_argument("--log-dir", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    host, _, port = args.broker.rpartition(":")
    client = BrokerClient(host, int(port))
    stage = StageSpec.from_dict(json.loads(args.stage))
    errlog = ErrorLog(args.log_dir, args.machine_id, client) if args.log_dir else None

    def alert(severity, message, context):
        rec = AlertRecord.now(args.machine_id, args.worker_id, stage.stage_name, severity,
                              message, context)
        if errlog is not None:
            errlog.record(rec)
        else:
            log.warning("%s %s", severity, message)

    desc = WorkerDescriptor(args.worker_id, stage.stage_name, args.machine_id, kind="subprocess")
    worker = StageWorker(desc, stage, make_handler(stage.handler_kind, json.loads(args.context)),
                         client, alert)
    signal.signal(signal.SIGTERM, lambda *_: worker._stop.set())
    t = threading.Thread(target=worker.run, daemon=True)
    t.start()
    worker._started.wait(10.0)
    print("READY", flush=True)
    while t.is_alive():
        t.join(0.2)
    client.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
