"""Network endpoints of the ingest tier: MQTT-subset server, raw-data HTTP API,
and cycle notifications into the first pipeline queue."""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from ..storage import format_value
from . import mqtt
from .rawstore import IngestError, RawStore, SampleBatch, UnknownDevice, parse_publish

log = logging.getLogger(__name__)

DOWNLOAD_QUEUE = "q.download"
DEDUP_WINDOW = 64
NOTIFY_ATTEMPTS = 5


@dataclass(frozen=True)
class CycleNotification:
    device_id: str
    start_us: int
    end_us: int
    cycle_id: str

    def __post_init__(self):
        if not isinstance(self.start_us, int) or not isinstance(self.end_us, int):
            raise ValueError("timestamps must be integers")
        if self.end_us <= self.start_us:
            raise ValueError("end_us must be greater than start_us")
        if not self.device_id or not self.cycle_id:
            raise ValueError("device_id and cycle_id are required")

    def to_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes | str | dict) -> "CycleNotification":
        obj = data if isinstance(data, dict) else json.loads(data)
        try:
            return cls(str(obj["device_id"]), obj["start_us"], obj["end_us"], str(obj["cycle_id"]))
        except KeyError as exc:
            raise ValueError(f"missing field {exc}") from None


class BrokerUnreachable(Exception):
    pass


def notify_cycle(
    broker_factory: Callable[[], object],
    note: CycleNotification,
    attempts: int = NOTIFY_ATTEMPTS,
    backoff_s: float = 0.05,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Publish ``note`` to ``q.download``; retries connection failures with
    exponential backoff and raises :class:`BrokerUnreachable` after ``attempts``."""
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            broker = broker_factory()
            broker.declare_queue(DOWNLOAD_QUEUE)
            return broker.publish(DOWNLOAD_QUEUE, note.to_json(), {"cycle_id": note.cycle_id})
        except (ConnectionError, OSError) as exc:
            last = exc
            log.warning("notify attempt %d failed: %s", attempt + 1, exc)
            if attempt + 1 < attempts:
                sleep(backoff_s * 2**attempt)
    raise BrokerUnreachable(f"gave up after {attempts} attempts: {last}")


# -- MQTT ---------------------------------------------------------------------

class _Session:
    def __init__(self, client_id: str):
        self.client_id = client_id
        self.recent_ids: deque[int] = deque(maxlen=DEDUP_WINDOW)
        # a reconnecting client may race the old connection's last PUBLISH
        self.lock = threading.Lock()

    def seen(self, packet_id: int) -> bool:
        return packet_id in self.recent_ids

    def remember(self, packet_id: int) -> None:
        if packet_id in self.recent_ids:
            self.recent_ids.remove(packet_id)
        self.recent_ids.append(packet_id)


class _MqttConnection(socketserver.BaseRequestHandler):
    server: "MqttServer"

    def handle(self):
        srv = self.server
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        buf = bytearray()
        session: _Session | None = None
        try:
            while True:
                try:
                    res = mqtt.decode_mqtt(buf)
                except mqtt.UnsupportedPacket as exc:
                    log.info("closing session: %s", exc)
                    srv.stats["rejected_packets"] += 1
                    sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.DISCONNECT)))
                    return
                except mqtt.MalformedPacket as exc:
                    log.info("malformed packet: %s", exc)
                    srv.stats["rejected_packets"] += 1
                    return
                if res is None:
                    chunk = sock.recv(65536)
                    if not chunk:
                        return
                    buf += chunk
                    continue
                pkt, used = res
                del buf[:used]
                if session is None:
                    if pkt.packet_type != mqtt.CONNECT:
                        return
                    if srv.allowed_clients is not None and pkt.client_id not in srv.allowed_clients:
                        sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.CONNACK, return_code=5)))
                        return
                    session, present = srv._session(pkt.client_id, pkt.clean_session)
                    sock.sendall(mqtt.encode_mqtt(
                        mqtt.MqttPacket(mqtt.CONNACK, session_present=present)))
                    continue
                if not self._dispatch(srv, session, pkt):
                    return
        except OSError:
            return

    def _dispatch(self, srv: "MqttServer", session: _Session, pkt: mqtt.MqttPacket) -> bool:
        sock = self.request
        t = pkt.packet_type
        if t == mqtt.PUBLISH:
            with session.lock:
                if pkt.qos == 1 and pkt.dup and session.seen(pkt.packet_id):
                    srv.stats["duplicates"] += 1
                else:
                    srv.receive(pkt.topic, pkt.body)
                    if pkt.qos == 1:
                        session.remember(pkt.packet_id)
            if pkt.qos == 1:
                sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.PUBACK, packet_id=pkt.packet_id)))
        elif t == mqtt.PINGREQ:
            sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.PINGRESP)))
        elif t == mqtt.SUBSCRIBE:
            codes = bytes(0x80 if ("#" in f or "+" in f) else min(q, 1) for f, q in pkt.subscriptions)
            sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.SUBACK, packet_id=pkt.packet_id, body=codes)))
        elif t == mqtt.DISCONNECT:
            return False
        else:
            return False
        return True


class MqttServer(socketserver.ThreadingTCPServer):
    """MQTT-subset endpoint; accepted PUBLISH bodies are parsed into the raw store."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store: RawStore, host: str = "127.0.0.1", port: int = 1883,
                 allowed_clients: set[str] | None = None):
        self.store = store
        self.allowed_clients = allowed_clients
        self.sessions: dict[str, _Session] = {}
        self._sessions_lock = threading.Lock()
        self.stats = {"batches": 0, "duplicates": 0, "rejected_batches": 0, "rejected_packets": 0}
        super().__init__((host, port), _MqttConnection)

    def _session(self, client_id: str, clean: bool) -> tuple[_Session, bool]:
        with self._sessions_lock:
            existing = self.sessions.get(client_id)
            if existing is not None and not clean:
                return existing, True
            s = _Session(client_id)
            self.sessions[client_id] = s
            return s, False

    def receive(self, topic: str, payload: bytes) -> SampleBatch | None:
        try:
            batch = handle_publish(self.store, topic, payload)
        except IngestError as exc:
            log.warning("rejected publish on %s: %s", topic, exc)
            self.stats["rejected_batches"] += 1
            return None
        self.stats["batches"] += 1
        return batch

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "MqttServer":
        threading.Thread(target=self.serve_forever, daemon=True, name="mqtt-server").start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def handle_publish(store: RawStore, topic: str, payload: bytes) -> SampleBatch:
    batch = parse_publish(topic, payload)
    store.append(batch)
    return batch


# -- HTTP ---------------------------------------------------------------------

class _IngestHttpHandler(BaseHTTPRequestHandler):
    server: "IngestHttpServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("http: " + fmt, *args)

    def _send(self, status: int, body: bytes, ctype: str, headers: dict | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"), "application/json")

    def do_GET(self):
        url = urlsplit(self.path)
        parts = url.path.strip("/").split("/")
        if len(parts) != 3 or parts[0] != "raw":
            return self._json(HTTPStatus.NOT_FOUND, {"error": "not-found"})
        device, channel = parts[1], parts[2]
        q = parse_qs(url.query)
        try:
            from_us = int(q["from_us"][0])
            to_us = int(q["to_us"][0])
            kind = q.get("kind", [None])[0]
            ts, vals = self.server.store.query(device, channel, from_us, to_us, kind)
        except (KeyError, ValueError) as exc:
            return self._json(HTTPStatus.BAD_REQUEST, {"error": f"bad-query: {exc}"})
        except UnknownDevice:
            return self._json(HTTPStatus.NOT_FOUND, {"error": "unknown-device", "device": device})
        lines = ["timestamp_us,value"]
        lines += [f"{t},{format_value(v)}" for t, v in zip(ts.tolist(), vals.tolist())]
        rate = self.server.store.rate_of(device, channel, kind)
        extra = {"X-Rate-Hz": format_value(rate)} if rate is not None else {}
        self._send(HTTPStatus.OK, ("\n".join(lines) + "\n").encode("ascii"), "text/csv", extra)

    def do_POST(self):
        if urlsplit(self.path).path != "/notify":
            return self._json(HTTPStatus.NOT_FOUND, {"error": "not-found"})
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            note = CycleNotification.from_json(raw)
        except (ValueError, TypeError) as exc:
            return self._json(HTTPStatus.BAD_REQUEST, {"error": f"bad-notification: {exc}"})
        try:
            msg_id = self.server.notify(note)
        except BrokerUnreachable as exc:
            return self._json(HTTPStatus.SERVICE_UNAVAILABLE, {"error": str(exc)})
        self._json(HTTPStatus.ACCEPTED, {"enqueued": True, "cycle_id": note.cycle_id, "msg_id": msg_id})


class IngestHttpServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, store: RawStore, broker_factory: Callable[[], object],
                 host: str = "127.0.0.1", port: int = 8000, backoff_s: float = 0.05):
        self.store = store
        self.broker_factory = broker_factory
        self.backoff_s = backoff_s
        super().__init__((host, port), _IngestHttpHandler)

    def notify(self, note: CycleNotification) -> str:
        return notify_cycle(self.broker_factory, note, backoff_s=self.backoff_s)

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "IngestHttpServer":
        threading.Thread(target=self.serve_forever, daemon=True, name="ingest-http").start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
