"""Handler registry.

A handler factory takes the pipeline context dict and returns the message
handler ``body -> output body | None``. Kinds are either registered names or
``"package.module:attr"`` paths, which subprocess workers resolve on their own.
"""

from __future__ import annotations

import importlib
import time
from typing import Callable

from .spec import UnknownHandler

Handler = Callable[[bytes], "bytes | None"]
HandlerFactory = Callable[[dict], Handler]

_REGISTRY: dict[str, HandlerFactory] = {}


def register_handler(kind: str, factory: HandlerFactory) -> None:
    _REGISTRY[kind] = factory


def _identity(ctx: dict) -> Handler:
    return lambda body: body


def _fail(ctx: dict) -> Handler:
    def handler(body: bytes):
        raise RuntimeError(ctx.get("fail_message", "handler failure"))
    return handler


def _sleep(ctx: dict) -> Handler:
    delay = float(ctx.get("sleep_ms", 50)) / 1000.0

    def handler(body: bytes):
        time.sleep(delay)
        return body
    return handler


def _busy(ctx: dict) -> Handler:
    """Spin on the CPU for ``busy_ms`` per message."""
    spin = float(ctx.get("busy_ms", 50)) / 1000.0

    def handler(body: bytes):
        end = time.thread_time() + spin
        x = 0
        while time.thread_time() < end:
            x += 1
        return body
    return handler


def _pdm(name: str) -> HandlerFactory:
    def factory(ctx: dict) -> Handler:
        from ..pdm import handlers as h
        pdm_ctx = h.PdmContext.from_config(ctx)
        fn = h.HANDLERS[name]
        return lambda body: fn(pdm_ctx, body)
    return factory


for _name, _factory in {
    "identity": _identity,
    "fail": _fail,
    "sleep": _sleep,
    "busy": _busy,
    "pdm.download": _pdm("pdm.download"),
    "pdm.clean": _pdm("pdm.clean"),
    "pdm.feature": _pdm("pdm.feature"),
    "pdm.classify": _pdm("pdm.classify"),
}.items():
    register_handler(_name, _factory)


def is_known(kind: str) -> bool:
    if kind in _REGISTRY:
        return True
    if ":" in kind:
        try:
            _import_attr(kind)
            return True
        except (ImportError, AttributeError):
            return False
    return False


def _import_attr(path: str):
    mod, _, attr = path.partition(":")
    return getattr(importlib.import_module(mod), attr)


def make_handler(kind: str, ctx: dict | None = None) -> Handler:
    ctx = ctx or {}
    if kind in _REGISTRY:
        return _REGISTRY[kind](ctx)
    if ":" in kind:
        try:
            factory = _import_attr(kind)
        except (ImportError, AttributeError) as exc:
            raise UnknownHandler(f"{kind}: {exc}") from None
        return factory(ctx)
    raise UnknownHandler(kind)
