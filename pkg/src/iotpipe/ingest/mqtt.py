"""MQTT 3.1.1 packet codec, restricted to the packet types and QoS levels we serve.

Supported: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK, SUBSCRIBE, SUBACK,
PINGREQ, PINGRESP, DISCONNECT. Anything else raises :class:`UnsupportedPacket`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

CONNECT, CONNACK, PUBLISH, PUBACK = 1, 2, 3, 4
SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT = 8, 9, 12, 13, 14

PACKET_NAMES = {
    CONNECT: "CONNECT",
    CONNACK: "CONNACK",
    PUBLISH: "PUBLISH",
    PUBACK: "PUBACK",
    SUBSCRIBE: "SUBSCRIBE",
    SUBACK: "SUBACK",
    PINGREQ: "PINGREQ",
    PINGRESP: "PINGRESP",
    DISCONNECT: "DISCONNECT",
}
# fixed-header flag nibble mandated for non-PUBLISH packets
_FIXED_FLAGS = {CONNECT: 0, CONNACK: 0, PUBACK: 0, SUBSCRIBE: 2, SUBACK: 0,
                PINGREQ: 0, PINGRESP: 0, DISCONNECT: 0}
MAX_REMAINING = 268_435_455


class MqttError(Exception):
    pass


class MalformedPacket(MqttError):
    pass


class UnsupportedPacket(MqttError):
    pass


@dataclass
class MqttPacket:
    packet_type: int
    flags: int = 0
    topic: str = ""
    packet_id: int = 0
    body: bytes = b""
    # CONNECT
    client_id: str = ""
    keepalive: int = 60
    clean_session: bool = True
    # CONNACK
    session_present: bool = False
    return_code: int = 0
    # SUBSCRIBE: [(topic filter, requested qos)]
    subscriptions: list[tuple[str, int]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return PACKET_NAMES.get(self.packet_type, str(self.packet_type))

    @property
    def qos(self) -> int:
        return (self.flags >> 1) & 0x03

    @property
    def dup(self) -> bool:
        return bool(self.flags & 0x08)

    @property
    def retain(self) -> bool:
        return bool(self.flags & 0x01)


def publish(topic: str, body: bytes, qos: int = 0, packet_id: int = 0, dup: bool = False) -> MqttPacket:
    flags = (qos << 1) | (0x08 if dup else 0)
    return MqttPacket(PUBLISH, flags, topic=topic, packet_id=packet_id, body=body)


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING:
        raise MalformedPacket(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            digit |= 0x80
        out.append(digit)
        if not n:
            return bytes(out)


def decode_remaining_length(buf, offset: int = 1) -> tuple[int, int] | None:
    """Returns (length, header bytes used) or None if more bytes are needed."""
    value = 0
    mult = 1
    for i in range(4):
        if offset + i >= len(buf):
            return None
        b = buf[offset + i]
        value += (b & 0x7F) * mult
        if not b & 0x80:
            return value, i + 1
        mult *= 128
    raise MalformedPacket("remaining length exceeds four bytes")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedPacket("string too long")
    return struct.pack(">H", len(raw)) + raw


def _read_str(body: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(body):
        raise MalformedPacket("truncated string length")
    (n,) = struct.unpack_from(">H", body, pos)
    end = pos + 2 + n
    if end > len(body):
        raise MalformedPacket("truncated string")
    try:
        return body[pos + 2 : end].decode("utf-8"), end
    except UnicodeDecodeError:
        raise MalformedPacket("invalid UTF-8") from None


def encode_mqtt(p: MqttPacket) -> bytes:
    t = p.packet_type
    if t == PUBLISH:
        if p.qos > 1:
            raise UnsupportedPacket("QoS 2 is not supported")
        var = _str(p.topic) + (struct.pack(">H", p.packet_id) if p.qos else b"")
        payload = bytes(p.body)
        flags = p.flags & 0x0F
    elif t == CONNECT:
        connect_flags = 0x02 if p.clean_session else 0
        var = _str("MQTT") + bytes([4, connect_flags]) + struct.pack(">H", p.keepalive)
        payload = _str(p.client_id)
        flags = 0
    elif t == CONNACK:
        var = bytes([1 if p.session_present else 0, p.return_code])
        payload = b""
        flags = 0
    elif t == PUBACK:
        var = struct.pack(">H", p.packet_id)
        payload = b""
        flags = 0
    elif t == SUBSCRIBE:
        var = struct.pack(">H", p.packet_id)
        payload = b"".join(_str(topic) + bytes([qos]) for topic, qos in p.subscriptions)
        flags = 2
    elif t == SUBACK:
        var = struct.pack(">H", p.packet_id)
        payload = bytes(p.body)
        flags = 0
    elif t in (PINGREQ, PINGRESP, DISCONNECT):
        var = payload = b""
        flags = 0
    else:
        raise UnsupportedPacket(f"packet type {t}")
    rest = var + payload
    return bytes([(t << 4) | flags]) + encode_remaining_length(len(rest)) + rest


def decode_mqtt(buf: bytes | bytearray) -> tuple[MqttPacket, int] | None:
    """Parse one packet from the start of ``buf``.

    Returns ``(packet, bytes_consumed)``, or None when ``buf`` holds only part
    of a packet.
    """
    if len(buf) < 2:
        return None
    first = buf[0]
    t, flags = first >> 4, first & 0x0F
    if t not in PACKET_NAMES:
        raise UnsupportedPacket(f"packet type {t}")
    if t == PUBLISH and (flags >> 1) & 0x03 > 1:
        raise UnsupportedPacket("QoS 2 PUBLISH")
    rl = decode_remaining_length(buf, 1)
    if rl is None:
        return None
    length, used = rl
    start = 1 + used
    if len(buf) < start + length:
        return None
    body = bytes(buf[start : start + length])
    return _decode_body(t, flags, body), start + length


def _decode_body(t: int, flags: int, body: bytes) -> MqttPacket:
    if t != PUBLISH and flags != _FIXED_FLAGS[t]:
        raise MalformedPacket(f"bad flags {flags:#x} for {PACKET_NAMES[t]}")
    if t == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos > 1:
            raise UnsupportedPacket("QoS 2 PUBLISH")
        topic, pos = _read_str(body, 0)
        pid = 0
        if qos:
            if pos + 2 > len(body):
                raise MalformedPacket("missing packet id")
            (pid,) = struct.unpack_from(">H", body, pos)
            pos += 2
            if pid == 0:
                raise MalformedPacket("packet id 0")
        return MqttPacket(PUBLISH, flags, topic=topic, packet_id=pid, body=body[pos:])
    if t == CONNECT:
        proto, pos = _read_str(body, 0)
        if proto != "MQTT" or pos + 4 > len(body):
            raise MalformedPacket("bad protocol name")
        level, cflags = body[pos], body[pos + 1]
        if level != 4:
            raise UnsupportedPacket(f"protocol level {level}")
        (keepalive,) = struct.unpack_from(">H", body, pos + 2)
        client_id, pos = _read_str(body, pos + 4)
        # will/username/password fields are accepted but ignored
        return MqttPacket(CONNECT, 0, client_id=client_id, keepalive=keepalive,
                          clean_session=bool(cflags & 0x02))
    if t == CONNACK:
        if len(body) != 2:
            raise MalformedPacket("CONNACK length")
        return MqttPacket(CONNACK, 0, session_present=bool(body[0] & 1), return_code=body[1])
    if t == PUBACK:
        if len(body) != 2:
            raise MalformedPacket("PUBACK length")
        return MqttPacket(PUBACK, 0, packet_id=struct.unpack(">H", body)[0])
    if t == SUBSCRIBE:
        if len(body) < 2:
            raise MalformedPacket("SUBSCRIBE length")
        (pid,) = struct.unpack_from(">H", body, 0)
        pos = 2
        subs = []
        while pos < len(body):
            topic, pos = _read_str(body, pos)
            if pos >= len(body):
                raise MalformedPacket("missing requested QoS")
            subs.append((topic, body[pos]))
            pos += 1
        if not subs:
            raise MalformedPacket("SUBSCRIBE without topics")
        return MqttPacket(SUBSCRIBE, 2, packet_id=pid, subscriptions=subs)
    if t == SUBACK:
        if len(body) < 3:
            raise MalformedPacket("SUBACK length")
        return MqttPacket(SUBACK, 0, packet_id=struct.unpack_from(">H", body, 0)[0], body=body[2:])
    if body:
        raise MalformedPacket(f"{PACKET_NAMES[t]} must be empty")
    return MqttPacket(t, 0)
