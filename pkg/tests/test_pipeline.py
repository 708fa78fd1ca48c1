import json
import threading
import time

import pytest

from iotpipe.messaging.broker import Broker
from iotpipe.messaging.server import BrokerServer
from iotpipe.monitor import ErrorLog
from iotpipe.pipeline import (
    MAX_ATTEMPTS,
    AtMaxWorkers,
    BrokenChain,
    DuplicateStage,
    MachineDescriptor,
    MachineUnavailable,
    NodeAgent,
    NodeAgentServer,
    PipelineError,
    PipelineManager,
    PipelineSpec,
    RemoteNodeAgent,
    StageSpec,
    StageWorker,
    UnknownHandler,
    UnknownWorker,
    WorkerDescriptor,
    make_handler,
    register_handler,
    smart_pdm_spec,
)


def wait_until(cond, timeout=10.0, poll=0.01):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if cond():
            return True
        time.sleep(poll)
    return cond()


def manager(tmp_path, context=None, machines=("m1",), **kw):
    b = Broker()
    log = ErrorLog(tmp_path / "logs", "ctl", b)
    mgr = PipelineManager(b, context or {}, tmp_path / "specs", log, **kw)
    for m in machines:
        mgr.add_machine(MachineDescriptor(m, "127.0.0.1", core_count=1))
    return b, mgr, log


# -- specs ---------------------------------------------------------------------

def test_register_smart_pdm_declares_queues(tmp_path):
    b, mgr, _ = manager(tmp_path)
    out = mgr.register_pipeline(smart_pdm_spec())
    assert out["queues"] == ["q.download", "q.clean", "q.feature", "q.classify"]
    for q in out["queues"]:
        assert q in b.queues() and q + ".dlq" in b.queues()
    assert PipelineSpec.load(tmp_path / "specs" / "smart-pdm.json") == smart_pdm_spec()


def test_register_rejects_bad_specs(tmp_path):
    _, mgr, _ = manager(tmp_path)
    with pytest.raises(BrokenChain):
        mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", "q.b", "identity"),
                                                 StageSpec("b", "q.x", None, "identity")]))
    with pytest.raises(DuplicateStage):
        mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", "q.b", "identity"),
                                                 StageSpec("a", "q.b", None, "identity")]))
    with pytest.raises(UnknownHandler):
        mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", None, "no-such")]))
    with pytest.raises(BrokenChain):
        mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", "q.b", "identity"),
                                                 StageSpec("b", "q.b", "q.a", "identity")]))
    with pytest.raises(PipelineError):
        StageSpec("a", "q.a", None, "identity", min_workers=3, max_workers=2)
    with pytest.raises(BrokenChain):
        StageSpec("a", "q.a", "q.a", "identity")


def test_single_terminal_stage_is_valid(tmp_path):
    _, mgr, _ = manager(tmp_path)
    assert mgr.register_pipeline(PipelineSpec("t", [StageSpec("only", "q.only", None,
                                                               "identity")]))["queues"] == ["q.only"]


def test_handler_kinds():
    assert make_handler("identity")(b"x") == b"x"
    register_handler("test.upper", lambda ctx: lambda body: body.upper())
    assert make_handler("test.upper")(b"ab") == b"AB"
    assert make_handler("iotpipe.pipeline.registry:_identity")(b"y") == b"y"  # module:attr
    with pytest.raises(UnknownHandler):
        make_handler("nope.nothing:here")


def test_worker_state_machine():
    d = WorkerDescriptor("w", "s", "m")
    d.move("running")
    d.move("draining")
    d.move("stopped")
    assert not d.live
    with pytest.raises(PipelineError):
        d.move("running")


# -- spawn / stop -------------------------------------------------------------

def test_spawn_limits(tmp_path):
    _, mgr, _ = manager(tmp_path, machines=("m1", "m2"))
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("s", "q.s", None, "identity", 1, 2)]))
    started = mgr.ensure_min_workers()
    assert len(started) == 1 and started[0].state == "running"
    mgr.spawn_worker("s", "m2")
    with pytest.raises(AtMaxWorkers):
        mgr.spawn_worker("s", "m1")
    mgr.machines["m2"].active = False
    mgr.stop_worker(started[0].worker_id)
    with pytest.raises(MachineUnavailable):
        mgr.spawn_worker("s", "m2")
    with pytest.raises(MachineUnavailable):
        mgr.spawn_worker("s", "m9")
    mgr.shutdown()


def test_stop_unknown_or_stopped_worker(tmp_path):
    _, mgr, _ = manager(tmp_path)
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("s", "q.s", None, "identity")]))
    d = mgr.ensure_min_workers()[0]
    assert mgr.stop_worker(d.worker_id).state == "stopped"
    with pytest.raises(UnknownWorker):
        mgr.stop_worker(d.worker_id)
    with pytest.raises(UnknownWorker):
        mgr.stop_worker("ghost")


class Gate:
    """Handler that blocks until released, to stop a worker mid-message."""

    def __init__(self):
        self.entered = threading.Event()
        self.release = threading.Event()

    def __call__(self, body):
        self.entered.set()
        self.release.wait(10)
        return body


def test_graceful_stop_finishes_and_acks(tmp_path):
    b = Broker()
    stage = StageSpec("s", "q.in", "q.out", "identity")
    b.declare_queue("q.in"), b.declare_queue("q.out")
    gate = Gate()
    w = StageWorker(WorkerDescriptor("w1", "s", "m1"), stage, gate, b).start()
    b.publish("q.in", b"m0")
    assert gate.entered.wait(5)
    stopper = threading.Thread(target=w.stop, kwargs={"graceful": True})
    stopper.start()
    assert wait_until(lambda: w.descriptor.state == "draining")
    gate.release.set()
    stopper.join(5)
    assert w.descriptor.state == "stopped"
    assert b.counters("q.in")["acked"] == 1
    assert b.queue_stats("q.out").depth == 1


def test_hard_stop_redelivers_with_count_two(tmp_path):
    b = Broker()
    stage = StageSpec("s", "q.in", "q.out", "identity")
    b.declare_queue("q.in"), b.declare_queue("q.out")
    gate = Gate()
    w = StageWorker(WorkerDescriptor("w1", "s", "m1"), stage, gate, b).start()
    b.publish("q.in", b"m0")
    assert gate.entered.wait(5)
    w.stop(graceful=False)
    assert w.descriptor.state == "stopped"
    gate.release.set()
    sub = b.consume("q.in")
    msg = sub.get(timeout=2)
    assert msg.payload == b"m0" and msg.delivery_count == 2
    time.sleep(0.1)
    assert b.queue_stats("q.out").depth == 0 and b.counters("q.in")["acked"] == 0


# -- stage loop --------------------------------------------------------------

def test_two_stage_identity_preserves_order(tmp_path):
    b, mgr, _ = manager(tmp_path)
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", "q.b", "identity"),
                                             StageSpec("b", "q.b", "q.c", "identity")]))
    b.declare_queue("q.c")
    mgr.ensure_min_workers()
    for i in range(10):
        b.publish("q.a", f"{i}".encode())
    assert wait_until(lambda: b.queue_stats("q.c").depth == 10)
    sub = b.consume("q.c", prefetch=10)
    got = [sub.get(timeout=1).payload for _ in range(10)]
    assert got == [f"{i}".encode() for i in range(10)]
    mgr.shutdown()


def test_multi_worker_stage_delivers_same_set(tmp_path):
    b, mgr, _ = manager(tmp_path, {"sleep_ms": 2})
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("a", "q.a", "q.b", "sleep", 3, 3)]))
    b.declare_queue("q.b")
    mgr.ensure_min_workers()
    for i in range(60):
        b.publish("q.a", f"{i}".encode())
    assert wait_until(lambda: b.queue_stats("q.b").depth == 60)
    sub = b.consume("q.b", prefetch=100)
    got = {sub.get(timeout=1).payload for _ in range(60)}
    assert got == {f"{i}".encode() for i in range(60)}
    mgr.shutdown()


def test_failing_handler_dead_letters_after_three_attempts(tmp_path):
    b, mgr, log = manager(tmp_path)
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("f", "q.f", None, "fail")]))
    mgr.ensure_min_workers()
    b.publish("q.f", b"poison")
    assert wait_until(lambda: b.queue_stats("q.f.dlq").depth == 1)
    assert b.counters("q.f")["acked"] == 0
    mgr.shutdown()
    recs = log.read("m1")
    assert [r.severity for r in recs] == ["WARN", "WARN", "ERROR"]
    assert recs[-1].context["delivery_count"] == str(MAX_ATTEMPTS)
    assert b.queue_stats("q.alerts").depth == 1


def test_prefetch_bounds_in_flight(tmp_path):
    b = Broker()
    stage = StageSpec("s", "q.in", None, "identity", prefetch=2)
    b.declare_queue("q.in")
    gate = Gate()
    w = StageWorker(WorkerDescriptor("w1", "s", "m1"), stage, gate, b).start()
    for i in range(10):
        b.publish("q.in", b"x")
    assert gate.entered.wait(5)
    assert b.counters("q.in")["in_flight"] == 2
    gate.release.set()
    assert wait_until(lambda: b.counters("q.in")["acked"] == 10)
    w.stop()


# -- remote workers and node agents ---------------------------------------------

@pytest.fixture
def broker_server():
    b = Broker()
    srv = BrokerServer(b, port=0).start()
    yield b, srv.address
    srv.stop()


def test_subprocess_worker(tmp_path, broker_server):
    b, addr = broker_server
    b.declare_queue("q.in"), b.declare_queue("q.out")
    agent = NodeAgent(MachineDescriptor("m1"), b, {}, addr, None, tmp_path)
    d = agent.spawn(StageSpec("s", "q.in", "q.out", "identity"), "w-sub", kind="subprocess")
    assert d.state == "running"
    for i in range(5):
        b.publish("q.in", f"{i}".encode())
    assert wait_until(lambda: b.queue_stats("q.out").depth == 5, timeout=20)
    assert agent.stop("w-sub", graceful=True).state == "stopped"
    assert b.counters("q.in")["acked"] == 5


def test_node_agent_control_endpoint(tmp_path):
    b = Broker()
    b.declare_queue("q.in")
    m = MachineDescriptor("m7")
    srv = NodeAgentServer(NodeAgent(m, b), port=0).start()
    remote = RemoteNodeAgent(m, *srv.address)
    stage = StageSpec("s", "q.in", None, "identity")
    assert remote.spawn(stage, "w1").state == "running"
    assert [d.worker_id for d in remote.live_workers()] == ["w1"]
    with pytest.raises(UnknownHandler):
        remote.spawn(StageSpec("s", "q.in", None, "missing"), "w2")
    assert remote.stop("w1").state == "stopped"
    with pytest.raises(UnknownWorker):
        remote.stop("w1")
    m.active = False
    with pytest.raises(MachineUnavailable):
        remote.spawn(stage, "w3")
    remote.close()
    srv.stop()


def test_manager_with_remote_agent(tmp_path):
    b = Broker()
    m = MachineDescriptor("m2")
    srv = NodeAgentServer(NodeAgent(m, b), port=0).start()
    mgr = PipelineManager(b)
    mgr.add_machine(m, RemoteNodeAgent(m, *srv.address))
    mgr.register_pipeline(PipelineSpec("p", [StageSpec("s", "q.s", "q.t", "identity")]))
    b.declare_queue("q.t")
    d = mgr.ensure_min_workers()[0]
    assert d.machine_id == "m2" and mgr.worker_count("s") == 1
    b.publish("q.s", b"hello")
    assert wait_until(lambda: b.queue_stats("q.t").depth == 1)
    mgr.stop_worker(d.worker_id)
    assert mgr.worker_count("s") == 0
    srv.stop()


# -- the maintenance pipeline ----------------------------------------------------

def test_conservation_over_full_pipeline(tmp_path):
    from iotpipe.cluster import LocalCluster
    from iotpipe.ingest import CycleNotification
    from iotpipe.simulator import SimConfig, generate_cycle, post_notification, publish_cycle

    with LocalCluster(tmp_path, max_workers=2) as c:
        c.install_bootstrap_model(per_class=1)
        ids = []
        for i in range(3):
            cfg = SimConfig(seed=100 + i, duration_scale=30 / 2820, speedup=0,
                            device_id=f"wm-{i:02d}")
            publish_cycle(generate_cycle(config=cfg), cfg, c.mqtt_endpoint, c.notify_url,
                          cycle_id=f"ok-{i}")
            ids.append(f"ok-{i}")
        # a window with no data and a duplicate notification
        post_notification(c.notify_url, CycleNotification("wm-99", 1, 2_000_000, "empty-0"))
        post_notification(c.notify_url, CycleNotification("wm-00", *_bounds(c, "ok-0"), "ok-0"))
        ids.append("empty-0")
        states = c.wait_for(ids, timeout=60)
        assert states == {"ok-0": "classified", "ok-1": "classified", "ok-2": "classified",
                          "empty-0": "failed"}
        queues = ("q.download", "q.clean", "q.feature", "q.classify")
        assert wait_until(lambda: all(c.broker.counters(q)["queued"] + c.broker.counters(q)[
            "in_flight"] == 0 for q in queues))
        # the duplicate notification is forwarded but never recomputed
        assert c.broker.counters("q.download")["acked"] == 5
        assert len(c.storage.list_manifests()) == 4
        for q in queues:
            assert c.broker.queue_stats(q + ".dlq").depth == 0


def _bounds(cluster, cycle_id):
    rec = cluster.storage.load_manifest(cycle_id)
    return rec.start_us, rec.end_us
