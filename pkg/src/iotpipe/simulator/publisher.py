"""Plays a generated cycle into the ingest tier over MQTT, then notifies."""

from __future__ import annotations

import json
import logging
import socket
import time
import urllib.request
from dataclasses import dataclass

from ..ingest import mqtt
from ..ingest.rawstore import SampleBatch
from ..ingest.service import CycleNotification
from ..storage import StreamSegment
from .generator import CycleSignals, SimConfig

log = logging.getLogger(__name__)


class PublishError(Exception):
    pass


class MqttPublisher:
    """Minimal QoS 1 publisher with a persistent session (clean_session=0)."""

    def __init__(self, host: str, port: int, client_id: str, timeout: float = 5.0):
        self.host, self.port = host, port
        self.client_id = client_id
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self._buf = bytearray()
        self._next_id = 0

    def connect(self) -> None:
        self.close()
        self.sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf.clear()
        self.sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(
            mqtt.CONNECT, client_id=self.client_id, clean_session=False)))
        ack = self._read()
        if ack.packet_type != mqtt.CONNACK or ack.return_code != 0:
            raise PublishError(f"connection refused (code {ack.return_code})")

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def disconnect(self) -> None:
        if self.sock is not None:
            try:
                self.sock.sendall(mqtt.encode_mqtt(mqtt.MqttPacket(mqtt.DISCONNECT)))
            except OSError:
                pass
        self.close()

    def next_packet_id(self) -> int:
        self._next_id = self._next_id % 0xFFFF + 1
        return self._next_id

    def send_publish(self, topic: str, body: bytes, packet_id: int, dup: bool = False) -> None:
        if self.sock is None:
            raise ConnectionError("not connected")
        self.sock.sendall(mqtt.encode_mqtt(mqtt.publish(topic, body, 1, packet_id, dup)))

    def wait_puback(self, packet_id: int) -> None:
        while True:
            pkt = self._read()
            if pkt.packet_type == mqtt.PUBACK and pkt.packet_id == packet_id:
                return

    def _read(self) -> mqtt.MqttPacket:
        while True:
            res = mqtt.decode_mqtt(self._buf)
            if res is not None:
                pkt, used = res
                del self._buf[:used]
                if pkt.packet_type == mqtt.DISCONNECT:
                    raise ConnectionError("server sent DISCONNECT")
                return pkt
            chunk = self.sock.recv(65536) if self.sock is not None else b""
            if not chunk:
                raise ConnectionError("connection closed")
            self._buf += chunk


def cycle_batches(signals: CycleSignals | tuple[StreamSegment, ...]) -> list[list[SampleBatch]]:
    """One-second batches, grouped per second: ``[[power, current, vibration], ...]``."""
    segs = signals.segments() if isinstance(signals, CycleSignals) else tuple(signals)
    seconds = []
    n_seconds = max(
        (len(s) if s.stream_kind == "slow" else -(-len(s) // int(s.rate_hz))) for s in segs)
    for k in range(n_seconds):
        group = []
        for s in segs:
            if s.stream_kind == "slow":
                if k < len(s):
                    group.append(SampleBatch(s.device_id, s.channel, "slow",
                                             int(s.timestamps[k]), 1, s.values[k : k + 1]))
            else:
                r = int(s.rate_hz)
                chunk = s.values[k * r : (k + 1) * r]
                if len(chunk):
                    group.append(SampleBatch(s.device_id, s.channel, "fast",
                                             s.start_us + k * 1_000_000, r, chunk))
        seconds.append(group)
    return seconds


@dataclass
class PublishReport:
    batches: int
    reconnects: int
    notification: CycleNotification | None


def publish_cycle(
    signals: CycleSignals,
    config: SimConfig,
    endpoint: tuple[str, int],
    notify_url: str | None = None,
    client_id: str | None = None,
    drop_after: int | None = None,
    max_reconnects: int = 10,
    cycle_id: str | None = None,
) -> PublishReport:
    """Publish a cycle at ``config.speedup`` x real time, QoS 1, one second of
    data per PUBLISH per channel, then POST the cycle bounds to ``notify_url``.

    ``drop_after`` forces a connection loss right after sending that many
    PUBLISH packets (before their PUBACK is read), to exercise resume.
    """
    pub = MqttPublisher(endpoint[0], endpoint[1], client_id or f"sim-{config.device_id}")
    pub.connect()
    seconds = cycle_batches(signals)
    sent = 0
    reconnects = 0
    t0 = time.monotonic()
    pace = config.speedup if config.speedup and config.speedup > 0 else None
    for k, group in enumerate(seconds):
        if pace is not None:
            delay = t0 + k / pace - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        for batch in group:
            pid = pub.next_packet_id()
            body = batch.to_payload()
            dup = False
            while True:
                try:
                    pub.send_publish(batch.topic, body, pid, dup)
                    sent += 1
                    if drop_after is not None and sent == drop_after:
                        pub.close()
                        raise ConnectionError("forced drop")
                    pub.wait_puback(pid)
                    break
                except (ConnectionError, OSError) as exc:
                    if reconnects >= max_reconnects:
                        raise PublishError(f"giving up after {reconnects} reconnects") from exc
                    reconnects += 1
                    log.info("reconnecting after: %s", exc)
                    time.sleep(min(0.05 * 2 ** (reconnects - 1), 1.0))
                    try:
                        pub.connect()
                    except (ConnectionError, OSError):
                        continue
                    dup = True
    pub.disconnect()

    note = None
    if notify_url is not None:
        note = CycleNotification(config.device_id, signals.start_us, signals.end_us,
                                 cycle_id or f"{config.device_id}-{signals.start_us}")
        post_notification(notify_url, note)
    return PublishReport(sent, reconnects, note)


def post_notification(base_url: str, note: CycleNotification, timeout: float = 10.0) -> dict:
    req = urllib.request.Request(
        base_url.rstrip("/") + "/notify", data=note.to_json(), method="POST",
        headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())
