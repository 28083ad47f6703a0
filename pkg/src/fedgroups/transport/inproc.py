"""Standalone simulation transport: every node lives in this process."""

from __future__ import annotations

import queue
import threading

from .base import UnknownPeer, queue_get
from .codec import Envelope, decode, encode


class InProcEndpoint:
    def __init__(self, transport: InProcTransport, node_id: str):
        self.node_id = node_id
        self._transport = transport
        self._queue: queue.Queue = queue.Queue()

    def send(self, to: str, e: Envelope) -> None:
        # Round-trip through the codec so in-process runs see exactly the
        # bytes a TCP peer would.
        self._transport._deliver(to, encode(e))

    def recv(self, timeout_ms: int | None = None) -> Envelope | None:
        return queue_get(self._queue, timeout_ms)

    def close(self) -> None:
        self._transport._unregister(self.node_id)


class InProcTransport:
    def __init__(self):
        self._endpoints: dict[str, InProcEndpoint] = {}
        self._lock = threading.Lock()

    def endpoint(self, node_id: str) -> InProcEndpoint:
        with self._lock:
            if node_id in self._endpoints:
                raise ValueError(f"endpoint {node_id!r} already registered")
            ep = InProcEndpoint(self, node_id)
            self._endpoints[node_id] = ep
            return ep

    def _deliver(self, to: str, frame: bytes) -> None:
        with self._lock:
            ep = self._endpoints.get(to)
        if ep is None:
            raise UnknownPeer(f"no endpoint registered for {to!r}")
        ep._queue.put(decode(frame))

    def _unregister(self, node_id: str) -> None:
        with self._lock:
            self._endpoints.pop(node_id, None)

    def close(self) -> None:
        with self._lock:
            self._endpoints.clear()
