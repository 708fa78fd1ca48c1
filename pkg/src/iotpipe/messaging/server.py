"""TCP front end for :class:`Broker` and the matching client."""

from __future__ import annotations

import base64
import logging
import queue as queue_mod
import socket
import socketserver
import threading
import uuid

from . import codec
from .broker import (
    Broker,
    BrokerError,
    InvalidQueueName,
    Message,
    PayloadTooLarge,
    QueueStats,
    UnknownDelivery,
    UnknownQueue,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 7621

_ERROR_KINDS = {
    InvalidQueueName: "invalid-name",
    UnknownQueue: "unknown-queue",
    PayloadTooLarge: "payload-too-large",
    UnknownDelivery: "unknown-delivery",
}
_ERROR_TYPES = {v: k for k, v in _ERROR_KINDS.items()}


def _error_kind(exc: Exception) -> str:
    for cls, kind in _ERROR_KINDS.items():
        if isinstance(exc, cls):
            return kind
    return "error"


class _Connection(socketserver.BaseRequestHandler):
    server: "BrokerServer"

    def setup(self):
        self.write_lock = threading.Lock()
        self.subs = {}
        self.alive = True
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, obj: dict) -> None:
        data = codec.pack(obj)
        with self.write_lock:
            self.request.sendall(data)

    def handle(self):
        broker = self.server.broker
        try:
            while self.alive:
                try:
                    req = codec.read_frame(self.request)
                except (codec.FrameError, OSError) as exc:
                    log.debug("closing connection: %s", exc)
                    break
                if req is None:
                    break
                try:
                    self.send(self._handle_op(broker, req))
                except BrokerError as exc:
                    self.send({"op": "error", "reason": _error_kind(exc), "msg_id": str(exc)})
                except (KeyError, ValueError, TypeError) as exc:
                    self.send({"op": "error", "reason": f"bad-request: {exc}"})
        except OSError:
            pass
        finally:
            self.alive = False
            for cid in list(self.subs):
                broker.disconnect(cid)

    def _handle_op(self, broker: Broker, req: dict) -> dict:
        op = req["op"]
        if op == "declare":
            return {"op": "ok", "stats": broker.declare_queue(req["queue"]).to_dict()}
        if op == "publish":
            payload = base64.b64decode(req.get("payload_b64", ""))
            msg_id = broker.publish(req["queue"], payload, req.get("headers") or {})
            return {"op": "ok", "msg_id": msg_id}
        if op == "consume":
            sub = broker.consume(req["queue"], int(req.get("prefetch", 1)), req.get("consumer_id"))
            self.subs[sub.consumer_id] = sub
            threading.Thread(target=self._pump, args=(sub,), daemon=True,
                             name=f"pump-{sub.consumer_id}").start()
            return {"op": "ok", "consumer_id": sub.consumer_id, "queue": sub.queue}
        if op == "ack":
            broker.ack(req["consumer_id"], req["msg_id"])
            return {"op": "ok", "msg_id": req["msg_id"]}
        if op == "nack":
            broker.nack(req["consumer_id"], req["msg_id"], bool(req.get("requeue", True)))
            return {"op": "ok", "msg_id": req["msg_id"]}
        if op == "stats":
            return {"op": "ok", "stats": broker.queue_stats(req["queue"]).to_dict()}
        return {"op": "error", "reason": f"unsupported-op: {op}"}

    def _pump(self, sub) -> None:
        while self.alive and sub.active:
            msg = sub.get(timeout=0.2)
            if msg is None:
                continue
            frame = codec.message_to_obj(msg)
            frame["consumer_id"] = sub.consumer_id
            try:
                self.send(frame)
            except OSError:
                self.alive = False
                break


class BrokerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.broker = broker
        super().__init__((host, port), _Connection)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True, name="broker-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class RemoteSubscription:
    def __init__(self, client: "BrokerClient", queue: str, prefetch: int, consumer_id: str):
        self.client = client
        self.queue = queue
        self.prefetch = prefetch
        self.consumer_id = consumer_id
        self.inbox: queue_mod.Queue = queue_mod.Queue()
        self.active = True

    def get(self, timeout: float | None = None) -> Message | None:
        if not self.active:
            return None
        try:
            return self.inbox.get(timeout=timeout)
        except queue_mod.Empty:
            return None

    def ack(self, msg_id: str) -> None:
        self.client.ack(self.consumer_id, msg_id)

    def nack(self, msg_id: str, requeue: bool = True) -> None:
        self.client.nack(self.consumer_id, msg_id, requeue)

    def cancel(self) -> None:
        # the protocol has no cancel op; dropping the connection releases the consumer
        self.active = False
        self.client.close()


class BrokerClient:
    """Blocking client speaking the broker frame protocol.

    Mirrors the :class:`Broker` surface so pipeline code can use either. One
    request is outstanding at a time; deliveries are routed to their
    subscription by a background reader thread.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 10.0):
        self.address = (host, port)
        self.timeout = timeout
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._req_lock = threading.Lock()
        self._replies: queue_mod.Queue = queue_mod.Queue()
        self._subs: dict[str, RemoteSubscription] = {}
        self.closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="broker-client")
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                obj = codec.read_frame(self.sock)
                if obj is None:
                    break
                if obj.get("op") == "deliver":
                    sub = self._subs.get(obj.get("consumer_id", ""))
                    if sub is not None:
                        sub.inbox.put(codec.obj_to_message(obj))
                else:
                    self._replies.put(obj)
        except (OSError, codec.FrameError):
            pass
        finally:
            self.closed = True
            self._replies.put(None)
            for sub in self._subs.values():
                sub.active = False

    def _call(self, req: dict) -> dict:
        with self._req_lock:
            if self.closed:
                raise ConnectionError("broker connection closed")
            try:
                self.sock.sendall(codec.pack(req))
            except OSError as exc:
                raise ConnectionError(str(exc)) from exc
            try:
                reply = self._replies.get(timeout=self.timeout)
            except queue_mod.Empty:
                raise ConnectionError("broker reply timed out") from None
        if reply is None:
            raise ConnectionError("broker connection closed")
        if reply["op"] == "error":
            cls = _ERROR_TYPES.get(reply.get("reason"), BrokerError)
            raise cls(reply.get("msg_id") or reply.get("reason"))
        return reply

    def declare_queue(self, name: str) -> QueueStats:
        return QueueStats.from_dict(self._call({"op": "declare", "queue": name})["stats"])

    def publish(self, queue: str, payload: bytes, headers: dict[str, str] | None = None) -> str:
        return self._call({
            "op": "publish",
            "queue": queue,
            "headers": dict(headers or {}),
            "payload_b64": base64.b64encode(bytes(payload)).decode("ascii"),
        })["msg_id"]

    def consume(self, queue: str, prefetch: int = 1, consumer_id: str | None = None) -> RemoteSubscription:
        req = {"op": "consume", "queue": queue, "prefetch": prefetch}
        # register before the reply so early deliveries are not dropped
        cid = consumer_id or f"c-{uuid.uuid4().hex[:12]}"
        req["consumer_id"] = cid
        sub = RemoteSubscription(self, queue, prefetch, cid)
        self._subs[cid] = sub
        try:
            self._call(req)
        except Exception:
            self._subs.pop(cid, None)
            raise
        return sub

    def ack(self, consumer_id: str, msg_id: str) -> None:
        self._call({"op": "ack", "consumer_id": consumer_id, "msg_id": msg_id})

    def nack(self, consumer_id: str, msg_id: str, requeue: bool = True) -> None:
        self._call({"op": "nack", "consumer_id": consumer_id, "msg_id": msg_id, "requeue": requeue})

    def queue_stats(self, queue: str) -> QueueStats:
        return QueueStats.from_dict(self._call({"op": "stats", "queue": queue})["stats"])

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

