"""Embedded message broker: named FIFO queues with competing consumers.

Every mutation goes through one broker lock, so a queue only ever has a single
logical owner at a time. Subscriptions are pull handles: the broker pushes
deliveries into a per-subscription buffer (bounded by ``prefetch``) and the
consumer drains it with :meth:`Subscription.get`.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

QUEUE_NAME_RE = re.compile(r"[a-z0-9._-]{1,128}")
DEFAULT_MAX_PAYLOAD = 8 * 1024 * 1024
DEFAULT_MAX_DELIVERIES = 3
DEFAULT_STATS_WINDOW_S = 10.0
DLQ_SUFFIX = ".dlq"


class BrokerError(Exception):
    """Base class for broker failures."""


class InvalidQueueName(BrokerError):
    pass


class UnknownQueue(BrokerError):
    pass


class PayloadTooLarge(BrokerError):
    pass


class UnknownDelivery(BrokerError):
    pass


@dataclass
class Message:
    msg_id: str
    queue: str
    headers: dict[str, str]
    payload: bytes
    delivery_count: int = 0


@dataclass(frozen=True)
class QueueStats:
    queue: str
    depth: int
    consumer_count: int
    enqueue_rate: float
    depth_delta: int

    def to_dict(self) -> dict:
        return {
            "queue": self.queue,
            "depth": self.depth,
            "consumer_count": self.consumer_count,
            "enqueue_rate": self.enqueue_rate,
            "depth_delta": self.depth_delta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueueStats":
        return cls(d["queue"], int(d["depth"]), int(d["consumer_count"]),
                   float(d["enqueue_rate"]), int(d["depth_delta"]))


@dataclass
class _Counters:
    published: int = 0
    acked: int = 0
    dead_lettered: int = 0


@dataclass
class _Queue:
    name: str
    ready: deque = field(default_factory=deque)
    consumers: list = field(default_factory=list)
    rr_next: int = 0
    counters: _Counters = field(default_factory=_Counters)
    # (time, depth) after each change; (time,) of each publish
    depth_log: deque = field(default_factory=deque)
    publish_log: deque = field(default_factory=deque)
    journal: "_Journal | None" = None


class Subscription:
    """Consumer handle returned by :meth:`Broker.consume`."""

    def __init__(self, broker: "Broker", queue: str, prefetch: int, consumer_id: str):
        self.broker = broker
        self.queue = queue
        self.prefetch = prefetch
        self.consumer_id = consumer_id
        self._buffer: deque[Message] = deque()
        self.unacked: dict[str, Message] = {}
        self.active = True

    def get(self, timeout: float | None = None) -> Message | None:
        """Next delivered message, or None if nothing arrives within ``timeout``."""
        cond = self.broker._cond
        with cond:
            if not self._buffer and self.active:
                cond.wait_for(lambda: self._buffer or not self.active, timeout)
            if self._buffer:
                return self._buffer.popleft()
            return None

    def ack(self, msg_id: str) -> None:
        self.broker.ack(self.consumer_id, msg_id)

    def nack(self, msg_id: str, requeue: bool = True) -> None:
        self.broker.nack(self.consumer_id, msg_id, requeue)

    def cancel(self) -> None:
        self.broker.disconnect(self.consumer_id)

    @property
    def in_flight(self) -> int:
        return len(self.unacked)

    def __iter__(self):
        while self.active:
            msg = self.get(timeout=0.1)
            if msg is not None:
                yield msg


class _Journal:
    """Append-only per-queue event log used to rebuild queue content."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, event: dict) -> None:
        self._fh.write(json.dumps(event, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def replay(path: Path) -> list[Message]:
        pending: dict[str, Message] = {}
        if not path.exists():
            return []
        queue = path.name[: -len(".journal")]
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    ev = json.loads(line)
                except json.JSONDecodeError:
                    break  # torn tail write
                if ev["e"] == "pub":
                    pending[ev["id"]] = Message(
                        ev["id"], queue, ev.get("h", {}), base64.b64decode(ev["p"]), 0)
                else:
                    pending.pop(ev["id"], None)
        return list(pending.values())


class Broker:
    """In-memory broker with optional per-queue journals.

    ``clock`` drives the rate/delta window accounting and can be replaced by a
    simulated clock in tests.
    """

    def __init__(
        self,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
        max_deliveries: int = DEFAULT_MAX_DELIVERIES,
        stats_window_s: float = DEFAULT_STATS_WINDOW_S,
        journal_dir: str | Path | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.max_payload = max_payload
        self.max_deliveries = max_deliveries
        self.stats_window_s = stats_window_s
        self.clock = clock
        self.journal_dir = Path(journal_dir) if journal_dir is not None else None
        if self.journal_dir is not None:
            self.journal_dir.mkdir(parents=True, exist_ok=True)
        self._cond = threading.Condition(threading.RLock())
        self._queues: dict[str, _Queue] = {}
        self._subs: dict[str, Subscription] = {}
        self._seen_ids: set[str] = set()

    # -- queues -----------------------------------------------------------

    def declare_queue(self, name: str) -> QueueStats:
        if not isinstance(name, str) or not QUEUE_NAME_RE.fullmatch(name):
            raise InvalidQueueName(name)
        with self._cond:
            self._ensure_queue(name)
            if not name.endswith(DLQ_SUFFIX):
                self._ensure_queue(name + DLQ_SUFFIX)
            return self._stats(name)

    def _ensure_queue(self, name: str) -> _Queue:
        q = self._queues.get(name)
        if q is not None:
            return q
        q = _Queue(name)
        now = self.clock()
        if self.journal_dir is not None:
            path = self.journal_dir / f"{name}.journal"
            for msg in _Journal.replay(path):
                q.ready.append(msg)
                self._seen_ids.add(msg.msg_id)
            q.journal = _Journal(path)
        q.counters.published = len(q.ready)
        q.depth_log.append((now, len(q.ready)))
        self._queues[name] = q
        return q

    def _get_queue(self, name: str) -> _Queue:
        try:
            return self._queues[name]
        except KeyError:
            raise UnknownQueue(name) from None

    def queues(self) -> list[str]:
        with self._cond:
            return sorted(self._queues)

    # -- publish / consume -----------------------------------------------

    def publish(self, queue: str, payload: bytes, headers: dict[str, str] | None = None) -> str:
        payload = bytes(payload)
        if len(payload) > self.max_payload:
            raise PayloadTooLarge(f"{len(payload)} > {self.max_payload}")
        with self._cond:
            q = self._get_queue(queue)
            msg_id = str(uuid.uuid4())
            while msg_id in self._seen_ids:
                msg_id = str(uuid.uuid4())
            self._seen_ids.add(msg_id)
            msg = Message(msg_id, queue, dict(headers or {}), payload, 0)
            if q.journal is not None:
                q.journal.write({"e": "pub", "id": msg_id, "h": msg.headers,
                                 "p": base64.b64encode(payload).decode("ascii")})
            q.ready.append(msg)
            q.counters.published += 1
            now = self.clock()
            q.publish_log.append(now)
            self._note_depth(q, now)
            self._dispatch(q)
            return msg_id

    def consume(self, queue: str, prefetch: int = 1, consumer_id: str | None = None) -> Subscription:
        if prefetch < 1:
            raise ValueError("prefetch must be >= 1")
        with self._cond:
            q = self._get_queue(queue)
            cid = consumer_id or f"c-{uuid.uuid4().hex[:12]}"
            if cid in self._subs:
                raise BrokerError(f"duplicate consumer id {cid}")
            sub = Subscription(self, queue, prefetch, cid)
            self._subs[cid] = sub
            q.consumers.append(sub)
            self._dispatch(q)
            return sub

    def _dispatch(self, q: _Queue) -> None:
        # Round-robin in registration order, skipping consumers at their prefetch limit.
        delivered = False
        while q.ready and q.consumers:
            n = len(q.consumers)
            target = None
            for step in range(n):
                idx = (q.rr_next + step) % n
                sub = q.consumers[idx]
                if len(sub.unacked) < sub.prefetch:
                    target = sub
                    q.rr_next = (idx + 1) % n
                    break
            if target is None:
                break
            msg = q.ready.popleft()
            msg.delivery_count += 1
            target.unacked[msg.msg_id] = msg
            target._buffer.append(msg)
            delivered = True
        if delivered:
            self._note_depth(q, self.clock())
            self._cond.notify_all()

    # -- acknowledgement --------------------------------------------------

    def _take(self, consumer_id: str, msg_id: str) -> tuple[Subscription, Message]:
        sub = self._subs.get(consumer_id)
        if sub is None or msg_id not in sub.unacked:
            raise UnknownDelivery(f"{consumer_id}/{msg_id}")
        msg = sub.unacked.pop(msg_id)
        try:
            sub._buffer.remove(msg)
        except ValueError:
            pass
        return sub, msg

    def ack(self, consumer_id: str, msg_id: str) -> None:
        with self._cond:
            sub, msg = self._take(consumer_id, msg_id)
            q = self._queues[sub.queue]
            q.counters.acked += 1
            if q.journal is not None:
                q.journal.write({"e": "ack", "id": msg_id})
            self._dispatch(q)

    def nack(self, consumer_id: str, msg_id: str, requeue: bool = True) -> None:
        with self._cond:
            sub, msg = self._take(consumer_id, msg_id)
            q = self._queues[sub.queue]
            if requeue:
                self._requeue(q, [msg])
            else:
                self._dead_letter(q, msg)
            self._dispatch(q)

    def disconnect(self, consumer_id: str) -> None:
        """Drop a consumer; its unacknowledged messages go back to the queue head."""
        with self._cond:
            sub = self._subs.pop(consumer_id, None)
            if sub is None:
                return
            sub.active = False
            q = self._queues[sub.queue]
            idx = q.consumers.index(sub)
            q.consumers.pop(idx)
            if q.consumers:
                if idx < q.rr_next:
                    q.rr_next -= 1
                q.rr_next %= len(q.consumers)
            else:
                q.rr_next = 0
            pending = list(sub.unacked.values())
            sub.unacked.clear()
            sub._buffer.clear()
            self._requeue(q, pending)
            self._dispatch(q)
            self._cond.notify_all()

    def _requeue(self, q: _Queue, msgs: list[Message]) -> None:
        back = []
        for msg in msgs:
            if self.max_deliveries and msg.delivery_count >= self.max_deliveries \
                    and not q.name.endswith(DLQ_SUFFIX):
                self._dead_letter(q, msg)
            else:
                back.append(msg)
        # msgs arrive in delivery order; keep it at the head
        for msg in reversed(back):
            q.ready.appendleft(msg)
        if back:
            self._note_depth(q, self.clock())

    def _dead_letter(self, q: _Queue, msg: Message) -> None:
        dlq = self._ensure_queue(q.name + DLQ_SUFFIX)
        q.counters.dead_lettered += 1
        if q.journal is not None:
            q.journal.write({"e": "dlq", "id": msg.msg_id})
        if dlq.journal is not None:
            dlq.journal.write({"e": "pub", "id": msg.msg_id, "h": msg.headers,
                               "p": base64.b64encode(msg.payload).decode("ascii")})
        moved = Message(msg.msg_id, dlq.name, msg.headers, msg.payload, msg.delivery_count)
        dlq.ready.append(moved)
        dlq.counters.published += 1
        now = self.clock()
        dlq.publish_log.append(now)
        self._note_depth(dlq, now)
        self._dispatch(dlq)

    # -- introspection ----------------------------------------------------

    def _note_depth(self, q: _Queue, now: float) -> None:
        q.depth_log.append((now, len(q.ready)))
        self._prune(q, now)

    def _prune(self, q: _Queue, now: float) -> None:
        horizon = now - self.stats_window_s
        while q.publish_log and q.publish_log[0] <= horizon:
            q.publish_log.popleft()
        # keep the newest entry at or before the horizon as the window baseline
        while len(q.depth_log) > 1 and q.depth_log[1][0] <= horizon:
            q.depth_log.popleft()

    def _stats(self, name: str) -> QueueStats:
        q = self._get_queue(name)
        now = self.clock()
        self._prune(q, now)
        horizon = now - self.stats_window_s
        baseline = 0
        for t, d in q.depth_log:
            if t <= horizon:
                baseline = d
            else:
                break
        rate = len(q.publish_log) / self.stats_window_s
        return QueueStats(name, len(q.ready), len(q.consumers), rate, len(q.ready) - baseline)

    def queue_stats(self, queue: str) -> QueueStats:
        with self._cond:
            return self._stats(queue)

    def counters(self, queue: str) -> dict[str, int]:
        """Conservation counters: published, acked, in_flight, queued, dead_lettered."""
        with self._cond:
            q = self._get_queue(queue)
            in_flight = sum(len(s.unacked) for s in q.consumers)
            return {
                "published": q.counters.published,
                "acked": q.counters.acked,
                "in_flight": in_flight,
                "queued": len(q.ready),
                "dead_lettered": q.counters.dead_lettered,
            }

    def close(self) -> None:
        with self._cond:
            for cid in list(self._subs):
                self.disconnect(cid)
            for q in self._queues.values():
                if q.journal is not None:
                    q.journal.close()
                    q.journal = None
