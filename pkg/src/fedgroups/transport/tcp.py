"""Distributed transport over TCP.

Each endpoint listens on its ``host:port``. Senders keep one connection per
destination and write frames prefixed by a u32 LE length, so TCP ordering
gives per-sender FIFO delivery.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections.abc import Mapping

from .base import ConnectionLost, Timeout, UnknownPeer, queue_get
from .codec import CodecError, Envelope, decode, encode

log = logging.getLogger(__name__)

_LEN = struct.Struct("<I")


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


def loopback_addresses(node_ids, host: str = "127.0.0.1") -> dict[str, str]:
    """Reserve a free loopback port for each node id."""
    out, held = {}, []
    for nid in node_ids:
        s = socket.socket()
        s.bind((host, 0))
        held.append(s)
        out[nid] = f"{host}:{s.getsockname()[1]}"
    for s in held:
        s.close()
    return out


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint:
    def __init__(self, transport: TcpTransport, node_id: str, address: str):
        self.node_id = node_id
        self._transport = transport
        self._queue: queue.Queue = queue.Queue()
        self._conns: dict[str, socket.socket] = {}
        self._send_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._closed = threading.Event()
        self._readers: list[socket.socket] = []

        host, port = parse_address(address)
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen()
        threading.Thread(target=self._accept_loop, name=f"tcp-accept-{node_id}", daemon=True).start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._readers.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        with conn:
            while not self._closed.is_set():
                try:
                    head = _recv_exact(conn, _LEN.size)
                    if head is None:
                        return
                    frame = _recv_exact(conn, _LEN.unpack(head)[0])
                    if frame is None:
                        return
                    self._queue.put(decode(frame))
                except CodecError as exc:
                    log.warning("%s: dropping connection after bad frame: %s", self.node_id, exc)
                    return
                except OSError:
                    return

    def _lock_for(self, to: str) -> threading.Lock:
        with self._locks_guard:
            return self._send_locks.setdefault(to, threading.Lock())

    def _connect(self, to: str) -> socket.socket:
        address = self._transport.addresses.get(to)
        if address is None:
            raise UnknownPeer(f"no address known for {to!r}")
        deadline = time.monotonic() + self._transport.connect_timeout_ms / 1000.0
        while True:
            try:
                sock = socket.create_connection(parse_address(address), timeout=5.0)
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise Timeout(f"could not reach {to!r} at {address}: {exc}") from exc
                time.sleep(0.05)

    def send(self, to: str, e: Envelope) -> None:
        frame = encode(e)
        with self._lock_for(to):
            sock = self._conns.get(to)
            if sock is None:
                sock = self._conns[to] = self._connect(to)
            try:
                sock.sendall(_LEN.pack(len(frame)) + frame)
            except OSError as exc:
                self._conns.pop(to, None)
                sock.close()
                raise ConnectionLost(f"lost connection to {to!r}: {exc}") from exc

    def recv(self, timeout_ms: int | None = None) -> Envelope | None:
        return queue_get(self._queue, timeout_ms)

    def close(self) -> None:
        self._closed.set()
        try:
            self._server.close()
        except OSError:
            pass
        for sock in list(self._conns.values()) + self._readers:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._conns.clear()


class TcpTransport:
    def __init__(self, addresses: Mapping[str, str], connect_timeout_ms: int = 10_000):
        self.addresses = dict(addresses)
        self.connect_timeout_ms = connect_timeout_ms
        self._endpoints: list[TcpEndpoint] = []

    def endpoint(self, node_id: str) -> TcpEndpoint:
        if node_id not in self.addresses:
            raise UnknownPeer(f"no address configured for {node_id!r}")
        ep = TcpEndpoint(self, node_id, self.addresses[node_id])
        self._endpoints.append(ep)
        return ep

    def close(self) -> None:
        for ep in self._endpoints:
            ep.close()
        self._endpoints.clear()
