"""Read-only HTTP API over cycle storage and cluster state."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, unquote, urlsplit

from ..monitor.elasticity import ScalingHistory
from ..storage import Storage, StorageError, UnknownCycle, read_feature_csv
from .export import UnknownChannel, load_series

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080
HISTORY_LIMIT = 100
_ID = r"([^/]+)"


class ManagerStatus:
    """Cluster status from an in-process pipeline manager."""

    def __init__(self, manager, history: ScalingHistory | None = None):
        self.manager = manager
        self.history = history

    def __call__(self) -> dict:
        mgr = self.manager
        queues = []
        if mgr.spec is not None:
            for q in mgr.spec.queues():
                queues += [q, q + ".dlq"]
        stats = {q: mgr.broker.queue_stats(q).to_dict() for q in queues}
        decisions = self.history.entries[-HISTORY_LIMIT:] if self.history is not None else []
        return {
            "machines": [m.to_dict() for m in mgr.machines.values()],
            "workers": [d.to_dict() for d in mgr.workers()],
            "queues": stats,
            "scaling_decisions": [d.to_dict() for d in decisions],
        }


class RemoteStatus:
    """Cluster status over a broker TCP endpoint; raises ConnectionError when it is down."""

    def __init__(self, broker_address: tuple[str, int], queues: list[str],
                 history_path: str | Path | None = None, agents: list | None = None):
        self.broker_address = broker_address
        self.queues = queues
        self.history_path = Path(history_path) if history_path else None
        self.agents = agents or []

    def __call__(self) -> dict:
        from ..messaging.server import BrokerClient

        client = BrokerClient(*self.broker_address, timeout=2.0)
        try:
            stats = {q: client.queue_stats(q).to_dict() for q in self.queues}
        finally:
            client.close()
        decisions = []
        if self.history_path is not None and self.history_path.exists():
            decisions = ScalingHistory.read(self.history_path)[-HISTORY_LIMIT:]
        return {
            "machines": [a.machine.to_dict() for a in self.agents],
            "workers": [d.to_dict() for a in self.agents for d in a.live_workers()],
            "queues": stats,
            "scaling_decisions": [d.to_dict() for d in decisions],
        }


class ApiError(Exception):
    def __init__(self, status: int, error: str, **detail):
        super().__init__(error)
        self.status = status
        self.body = {"error": error, **detail}


class _ApiHandler(BaseHTTPRequestHandler):
    server: "ApiServer"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _json(self, status: int, obj) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        url = urlsplit(self.path)
        path = unquote(url.path).rstrip("/") or "/"
        query = parse_qs(url.query)
        try:
            for pattern, fn in ROUTES:
                m = re.fullmatch(pattern, path)
                if m:
                    return self._json(HTTPStatus.OK, fn(self.server, query, *m.groups()))
            raise ApiError(HTTPStatus.NOT_FOUND, "not-found", path=path)
        except ApiError as exc:
            self._json(exc.status, exc.body)
        except Exception as exc:  # never leak a traceback as a dropped connection
            log.exception("api failure on %s", path)
            self._json(HTTPStatus.INTERNAL_SERVER_ERROR, {"error": "internal", "detail": str(exc)})

    def _refuse(self):
        self._json(HTTPStatus.METHOD_NOT_ALLOWED, {"error": "read-only"})

    do_POST = do_PUT = do_DELETE = do_PATCH = _refuse


def _manifest(srv: "ApiServer", cycle_id: str):
    try:
        return srv.storage.load_manifest(cycle_id)
    except UnknownCycle:
        raise ApiError(HTTPStatus.NOT_FOUND, "unknown-cycle", cycle_id=cycle_id) from None


def _devices(srv, q):
    return sorted({r.device_id for r in srv.storage.list_manifests()})


def _device_cycles(srv, q, device_id):
    recs = [r for r in srv.storage.list_manifests() if r.device_id == device_id]
    if not recs:
        raise ApiError(HTTPStatus.NOT_FOUND, "unknown-device", device_id=device_id)
    return [{"cycle_id": r.cycle_id, "start_us": r.start_us, "end_us": r.end_us,
             "status": r.status} for r in sorted(recs, key=lambda r: (r.start_us, r.cycle_id))]


def _cycle(srv, q, cycle_id):
    return _manifest(srv, cycle_id).to_dict()


def _features(srv, q, cycle_id):
    _manifest(srv, cycle_id)
    path = srv.storage.features_path(cycle_id)
    if not path.exists():
        raise ApiError(HTTPStatus.NOT_FOUND, "no-features", cycle_id=cycle_id)
    names, values = read_feature_csv(path)
    return {"cycle_id": cycle_id, "names": names, "values": values.tolist()}


def _prediction(srv, q, cycle_id):
    _manifest(srv, cycle_id)
    path = srv.storage.prediction_path(cycle_id)
    if not path.exists():
        raise ApiError(HTTPStatus.NOT_FOUND, "no-prediction", cycle_id=cycle_id)
    return json.loads(path.read_text(encoding="utf-8"))


def _plot(srv, q, cycle_id):
    _manifest(srv, cycle_id)
    channel = q.get("channel", [None])[0]
    if not channel:
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad-query", detail="channel is required")
    try:
        points = int(q.get("points", ["2000"])[0])
    except ValueError:
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad-query", detail="points must be an integer") from None
    if points < 1:
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad-query", detail="points must be >= 1")
    level = q.get("level", [None])[0]
    if level not in (None, "raw", "clean"):
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad-query", detail="level is raw or clean")
    try:
        return load_series(srv.storage, cycle_id, channel, points, level).to_dict()
    except UnknownChannel as exc:
        raise ApiError(HTTPStatus.NOT_FOUND, "unknown-channel", detail=str(exc)) from None
    except (StorageError, FileNotFoundError) as exc:
        raise ApiError(HTTPStatus.NOT_FOUND, "no-data", detail=str(exc)) from None


def _cluster(srv, q):
    if srv.status_source is None:
        raise ApiError(HTTPStatus.SERVICE_UNAVAILABLE, "broker-unreachable")
    try:
        return srv.status_source()
    except (ConnectionError, OSError) as exc:
        raise ApiError(HTTPStatus.SERVICE_UNAVAILABLE, "broker-unreachable", detail=str(exc)) from None


ROUTES = [
    (r"/api/devices", _devices),
    (rf"/api/devices/{_ID}/cycles", _device_cycles),
    (rf"/api/cycles/{_ID}", _cycle),
    (rf"/api/cycles/{_ID}/features", _features),
    (rf"/api/cycles/{_ID}/prediction", _prediction),
    (rf"/api/cycles/{_ID}/plot", _plot),
    (r"/api/cluster/status", _cluster),
]


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, storage: Storage | str | Path, status_source=None,
                 host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.storage = storage if isinstance(storage, Storage) else Storage(storage)
        self.status_source = status_source
        super().__init__((host, port), _ApiHandler)

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        threading.Thread(target=self.serve_forever, daemon=True, name="api").start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve(storage_root: str | Path, status_source=None, host: str = "127.0.0.1",
          port: int = DEFAULT_PORT) -> ApiServer:
    return ApiServer(storage_root, status_source, host, port).start()


def main(argv: list[str] | None = None) -> int:
    from ..pipeline import smart_pdm_spec

    ap = argparse.ArgumentParser(prog="iotpipe-api", description="Serve the read-only HTTP API.")
    ap.add_argument("--storage", default="./store", help="storage root")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=DEFAULT_PORT)
    ap.add_argument("--broker", default=None, help="host:port of the broker for /api/cluster/status")
    ap.add_argument("--history", default=None, help="scaling-history JSONL file")
    args = ap.parse_args(argv)
    source = None
    if args.broker:
        host, _, port = args.broker.rpartition(":")
        queues = [q for s in smart_pdm_spec().queues() for q in (s, s + ".dlq")]
        source = RemoteStatus((host or "127.0.0.1", int(port)), queues, args.history)
    srv = ApiServer(args.storage, source, args.host, args.port)
    print(f"serving on {srv.base_url}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
