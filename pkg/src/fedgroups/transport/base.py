from __future__ import annotations

import queue
from typing import Protocol

from .codec import Envelope


class TransportError(Exception):
    pass


class UnknownPeer(TransportError):
    pass


class ConnectionLost(TransportError):
    """The link to a peer dropped; retrying may succeed."""


class Timeout(TransportError):
    pass


class Endpoint(Protocol):
    node_id: str

    def send(self, to: str, e: Envelope) -> None: ...

    def recv(self, timeout_ms: int | None = None) -> Envelope | None: ...

    def close(self) -> None: ...


class Transport(Protocol):
    def endpoint(self, node_id: str) -> Endpoint: ...

    def close(self) -> None: ...


def queue_get(q: queue.Queue, timeout_ms: int | None) -> Envelope | None:
    """Pop the next envelope, or ``None`` once ``timeout_ms`` elapses."""
    try:
        if timeout_ms is None:
            return q.get()
        return q.get(timeout=max(timeout_ms, 0) / 1000.0)
    except queue.Empty:
        return None
