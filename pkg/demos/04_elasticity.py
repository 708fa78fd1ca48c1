#!/usr/bin/env python3
"""
Elasticity on a simulated clock.

A burst of 500 messages hits a stage whose handler takes 50 ms. The controller
adds workers while the backlog grows and utilisation is high, and removes them
once the queue is empty and the workers sit idle.
"""

from iotpipe.monitor import ElasticityConfig, simulate_burst

cfg = ElasticityConfig(probe_period_s=1.0, cooldown_s=2.0)
result = simulate_burst(n_messages=500, service_s=0.05, min_workers=1, max_workers=4, config=cfg)

print("decisions:")
for d in result.decisions:
    who = f" ({d.worker_id})" if d.worker_id else ""
    print(f"  t={d.decided_at:5.1f} s  {d.action:10s} on {d.machine_id}{who}  [{d.reason}]")

print(f"\nqueue drained at t={result.drained_at:.2f} s, {result.acked} messages acked")
print("worker count over time:")
last = None
for t, n in result.trace:
    if n != last:
        print(f"  t={t:5.2f} s  {'#' * n} {n}")
        last = n

# with the default 30 s cooldown the burst is gone before the pool can grow
slow = simulate_burst(config=ElasticityConfig(), tick_s=0.05, horizon_s=90)
print(f"\ndefault config: drained at t={slow.drained_at:.1f} s with at most {slow.max_count} workers")
