"""Stream transports carrying frames: in-memory pipes and TCP sockets.

Every transport exposes ``send_frame``, ``recv_frame`` and ``close``.
Endpoints are addressed as ``tcp://host:port`` (or bare ``host:port``)
or ``mem://name`` for pipes registered on a :class:`MemoryNetwork`.
"""
from __future__ import annotations

import collections
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass, field

from .wire import HEADER, MAX_BODY, Frame, FrameError, FrameType, decode_frame


class TransportClosed(ConnectionError):
    """The peer closed the stream or the transport was closed locally."""


@dataclass
class LinkModel:
    """Per-message delay: fixed latency, uniform jitter and a bandwidth cap.

    ``bandwidth_bps`` of ``None`` means the link adds no serialization delay.
    """

    latency_s: float = 0.0
    jitter_s: float = 0.0
    bandwidth_bps: float | None = None
    seed: int | None = None
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        if self.latency_s < 0 or self.jitter_s < 0:
            raise ValueError("latency and jitter must be non-negative")
        self._rng = random.Random(self.seed)

    def delay(self, nbytes: int) -> float:
        d = self.latency_s
        if self.jitter_s:
            d += self._rng.uniform(0.0, self.jitter_s)
        if self.bandwidth_bps:
            d += nbytes * 8 / self.bandwidth_bps
        return d

    @property
    def is_null(self) -> bool:
        return not (self.latency_s or self.jitter_s or self.bandwidth_bps)


def _sleep_precise(seconds: float) -> None:
    # time.sleep overshoots by ~50-100us; spin for the tail.
    if seconds <= 0:
        return
    deadline = time.perf_counter() + seconds
    if seconds > 0.002:
        time.sleep(seconds - 0.001)
    while time.perf_counter() < deadline:
        pass


class _PipeEnd:
    def __init__(self, inbox: collections.deque, outbox: collections.deque,
                 cond: threading.Condition, state: dict):
        self._inbox = inbox
        self._outbox = outbox
        self._cond = cond
        self._state = state
        self.link: LinkModel | None = None

    def send_frame(self, frame: Frame) -> None:
        data = frame.encode()
        if self.link is not None and not self.link.is_null:
            _sleep_precise(self.link.delay(len(data)))
        with self._cond:
            if self._state["closed"]:
                raise TransportClosed("pipe closed")
            self._outbox.append(data)
            self._cond.notify_all()

    def recv_frame(self, timeout: float | None = None) -> Frame:
        with self._cond:
            ok = self._cond.wait_for(lambda: self._inbox or self._state["closed"], timeout)
            if not ok:
                raise TimeoutError("no frame within timeout")
            if not self._inbox:
                raise TransportClosed("pipe closed")
            data = self._inbox.popleft()
        return decode_frame(data)

    def pending(self) -> int:
        with self._cond:
            return len(self._inbox)

    def close(self) -> None:
        with self._cond:
            self._state["closed"] = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._state["closed"]


def memory_pipe(link: LinkModel | None = None) -> tuple[_PipeEnd, _PipeEnd]:
    """Two connected in-memory transports. Closing either end closes both."""
    a_to_b: collections.deque = collections.deque()
    b_to_a: collections.deque = collections.deque()
    cond = threading.Condition()
    state = {"closed": False}
    a = _PipeEnd(b_to_a, a_to_b, cond, state)
    b = _PipeEnd(a_to_b, b_to_a, cond, state)
    a.link = b.link = link
    return a, b


class TcpTransport:
    def __init__(self, sock: socket.socket, link: LinkModel | None = None):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self.link = link
        self.closed = False

    def send_frame(self, frame: Frame) -> None:
        data = frame.encode()
        if self.link is not None and not self.link.is_null:
            _sleep_precise(self.link.delay(len(data)))
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise TimeoutError("no frame within timeout") from None
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed connection")
            buf += chunk
        return bytes(buf)

    def recv_frame(self, timeout: float | None = None) -> Frame:
        self._sock.settimeout(timeout)
        header = self._read_exact(HEADER.size)
        _, length = HEADER.unpack(header)
        if length > MAX_BODY:
            raise FrameError(f"frame body of {length} bytes exceeds limit")
        body = self._read_exact(length) if length else b""
        return decode_frame(header + body)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_endpoint(endpoint: str) -> tuple[str, str | tuple[str, int]]:
    """Split an endpoint string into ``("tcp", (host, port))`` or ``("mem", name)``."""
    if endpoint.startswith("mem://"):
        return "mem", endpoint[len("mem://"):]
    addr = endpoint[len("tcp://"):] if endpoint.startswith("tcp://") else endpoint
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad endpoint {endpoint!r}")
    return "tcp", (host or "127.0.0.1", int(port))


class MemoryNetwork:
    """Registry of named in-memory listeners."""

    def __init__(self):
        self._listeners: dict[str, MemoryListener] = {}
        self._lock = threading.Lock()

    def listen(self, name: str, link: LinkModel | None = None) -> "MemoryListener":
        with self._lock:
            if name in self._listeners:
                raise OSError(f"address mem://{name} already in use")
            lst = MemoryListener(self, name, link)
            self._listeners[name] = lst
            return lst

    def connect(self, name: str) -> _PipeEnd:
        with self._lock:
            lst = self._listeners.get(name)
        if lst is None:
            raise ConnectionRefusedError(f"nothing listening on mem://{name}")
        client, server = memory_pipe(lst.link)
        lst._queue.put(server)
        return client

    def _unregister(self, name: str) -> None:
        with self._lock:
            self._listeners.pop(name, None)


class MemoryListener:
    def __init__(self, network: MemoryNetwork, name: str, link: LinkModel | None):
        self.network = network
        self.name = name
        self.link = link
        self._queue: "queue.Queue[_PipeEnd]" = queue.Queue()

    def accept(self, timeout: float | None = None) -> _PipeEnd:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no connection within timeout") from None

    def close(self) -> None:
        self.network._unregister(self.name)


DEFAULT_NETWORK = MemoryNetwork()


def connect(endpoint: str, *, network: MemoryNetwork | None = None,
            timeout: float = 5.0, link: LinkModel | None = None):
    """Open a transport to ``endpoint``. Raises ``ConnectionError`` subclasses."""
    kind, addr = parse_endpoint(endpoint)
    if kind == "mem":
        return (network or DEFAULT_NETWORK).connect(addr)
    sock = socket.create_connection(addr, timeout=timeout)
    return TcpTransport(sock, link)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, link: LinkModel | None = None):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(64)
        self.link = link

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"tcp://{host}:{port}"

    def accept(self, timeout: float | None = None) -> TcpTransport:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise TimeoutError("no connection within timeout") from None
        conn.settimeout(None)
        return TcpTransport(conn, self.link)

    def close(self) -> None:
        self._sock.close()


class FaultyTransport:
    """Wraps a transport and injects faults on the send path.

    ``close_after_data`` closes the transport once that many DATA frames
    have been sent; ``drop`` is a set of send indices to silently discard;
    ``duplicate`` is a set of send indices delivered twice; ``mutate`` maps
    a send index to a callable rewriting the frame.
    """

    def __init__(self, inner, *, close_after_data: int | None = None,
                 drop: set[int] | None = None, duplicate: set[int] | None = None,
                 mutate: dict | None = None):
        self.inner = inner
        self.close_after_data = close_after_data
        self.drop = drop or set()
        self.duplicate = duplicate or set()
        self.mutate = mutate or {}
        self.sent = 0
        self.data_sent = 0

    def send_frame(self, frame: Frame) -> None:
        idx = self.sent
        self.sent += 1
        if frame.frame_type == FrameType.DATA:
            if self.close_after_data is not None and self.data_sent >= self.close_after_data:
                self.inner.close()
                raise TransportClosed("fault injection: link cut")
            self.data_sent += 1
        if idx in self.drop:
            return
        if idx in self.mutate:
            frame = self.mutate[idx](frame)
        self.inner.send_frame(frame)
        if idx in self.duplicate:
            self.inner.send_frame(frame)

    def recv_frame(self, timeout: float | None = None) -> Frame:
        return self.inner.recv_frame(timeout)

    def close(self) -> None:
        self.inner.close()


__all__ = [
    "FaultyTransport", "FrameError", "LinkModel", "MemoryNetwork", "TcpListener",
    "TcpTransport", "TransportClosed", "connect", "memory_pipe", "parse_endpoint",
]
