#!/usr/bin/env python3
"""
Broker basics: competing consumers, acknowledgements, redelivery and dead letters.
"""

from iotpipe.messaging import Broker

b = Broker()
b.declare_queue("q.jobs")
for i in range(6):
    b.publish("q.jobs", f"job-{i}".encode())
print("depth after publishing:", b.queue_stats("q.jobs").depth)

# two consumers share the queue round-robin
alice = b.consume("q.jobs", prefetch=1, consumer_id="alice")
carol = b.consume("q.jobs", prefetch=1, consumer_id="carol")
m1, m2 = alice.get(timeout=0), carol.get(timeout=0)
print("alice got", m1.payload, "| carol got", m2.payload)
alice.ack(m1.msg_id)

# carol disconnects without acking: her message is delivered again
carol.cancel()
while (m := alice.get(timeout=0)) is not None:
    print(f"  alice: {m.payload.decode()} (delivery {m.delivery_count})")
    alice.ack(m.msg_id)
print("counters:", b.counters("q.jobs"))

# a message that keeps failing ends up in the dead-letter queue after 3 deliveries
b.declare_queue("q.poison")
b.publish("q.poison", b"bad input")
sub = b.consume("q.poison")
while (m := sub.get(timeout=0)) is not None:
    print(f"  attempt {m.delivery_count} failed")
    sub.nack(m.msg_id, requeue=True)
print("q.poison.dlq depth:", b.queue_stats("q.poison.dlq").depth)
