"""Wire framing for broker traffic.

A frame is a 4-byte big-endian length ``N`` followed by ``N`` bytes of UTF-8
JSON. Binary payloads travel base64-encoded under ``payload_b64``.
"""

from __future__ import annotations

import base64
import json
import struct

from .broker import Message

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


class FrameError(Exception):
    pass


class TruncatedFrame(FrameError):
    """The buffer ends before the frame does; read more bytes and retry."""


class MalformedFrame(FrameError):
    pass


def pack(obj: dict) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise MalformedFrame(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


def unpack(buf: bytes | bytearray | memoryview) -> tuple[dict, int]:
    """Parse one frame from the start of ``buf``; returns (object, bytes consumed)."""
    if len(buf) < 4:
        raise TruncatedFrame("length prefix incomplete")
    (n,) = _LEN.unpack_from(buf, 0)
    if n > MAX_FRAME:
        raise MalformedFrame(f"declared length {n} exceeds {MAX_FRAME}")
    if len(buf) < 4 + n:
        raise TruncatedFrame(f"need {4 + n} bytes, have {len(buf)}")
    try:
        obj = json.loads(bytes(buf[4 : 4 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(str(exc)) from None
    if not isinstance(obj, dict) or "op" not in obj:
        raise MalformedFrame("frame body must be an object with an 'op' field")
    return obj, 4 + n


def message_to_obj(msg: Message) -> dict:
    return {
        "op": "deliver",
        "queue": msg.queue,
        "msg_id": msg.msg_id,
        "headers": dict(msg.headers),
        "payload_b64": base64.b64encode(msg.payload).decode("ascii"),
        "delivery_count": msg.delivery_count,
    }


def obj_to_message(obj: dict) -> Message:
    try:
        return Message(
            msg_id=str(obj["msg_id"]),
            queue=str(obj["queue"]),
            headers={str(k): str(v) for k, v in obj.get("headers", {}).items()},
            payload=base64.b64decode(obj.get("payload_b64", ""), validate=True),
            delivery_count=int(obj.get("delivery_count", 0)),
        )
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise MalformedFrame(f"bad deliver frame: {exc}") from None


def encode_frame(msg: Message) -> bytes:
    return pack(message_to_obj(msg))


def decode_frame(buf: bytes) -> Message:
    obj, _ = unpack(buf)
    if obj.get("op") != "deliver":
        raise MalformedFrame(f"expected deliver frame, got {obj.get('op')!r}")
    return obj_to_message(obj)


def read_frame(sock) -> dict | None:
    """Blocking read of one frame from a socket; None on clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise MalformedFrame(f"declared length {n} exceeds {MAX_FRAME}")
    body = _recv_exact(sock, n)
    if body is None:
        raise TruncatedFrame("connection closed mid-frame")
    obj, _ = unpack(head + body)
    return obj


def _recv_exact(sock, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise TruncatedFrame("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
