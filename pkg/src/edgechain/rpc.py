"""Request/response RPC over a secure or plain channel.

A request body is ``fields(method, *args)``; a reply is ``fields(b"ok", *results)``
or ``fields(b"err", kind, message)``. See WIRE.md.
"""
from __future__ import annotations

import logging
import threading
from typing import Callable

from .channel import KeyPair, PlainChannel, SecureChannel, SecureChannelError, SessionRegistry
from .transport import MemoryNetwork, TransportClosed, connect
from .wire import FrameError, decode_fields, encode_fields

log = logging.getLogger(__name__)

Handler = Callable[[list[bytes]], list[bytes]]


class RemoteError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


def encode_request(method: str, *args: bytes) -> bytes:
    return encode_fields(method.encode(), *args)


def dispatch(handlers: dict[str, Handler], body: bytes) -> bytes:
    try:
        fields = decode_fields(body)
        method, args = fields[0].decode(), fields[1:]
        handler = handlers[method]
    except (FrameError, IndexError, UnicodeDecodeError, KeyError) as exc:
        return encode_fields(b"err", b"BadRequest", str(exc).encode())
    try:
        return encode_fields(b"ok", *handler(args))
    except Exception as exc:  # report any handler failure to the caller
        kind = getattr(exc, "kind", type(exc).__name__)
        return encode_fields(b"err", str(kind).encode(), str(exc).encode())


def decode_reply(body: bytes) -> list[bytes]:
    fields = decode_fields(body)
    if not fields:
        raise FrameError("empty reply")
    if fields[0] == b"ok":
        return fields[1:]
    kind = fields[1].decode() if len(fields) > 1 else "Unknown"
    message = fields[2].decode() if len(fields) > 2 else ""
    raise RemoteError(kind, message)


class RpcServer:
    """Accepts connections and answers requests until each peer closes."""

    def __init__(self, handlers: dict[str, Handler], listener, *,
                 keypair: KeyPair | None = None, name: str = "node"):
        self.handlers = handlers
        self.listener = listener
        self.keypair = keypair
        self.name = name
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.registry = SessionRegistry()

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True,
                                        name=f"rpc-{self.name}")
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                link = self.listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except OSError:
                return
            threading.Thread(target=self.serve_connection, args=(link,), daemon=True).start()

    def serve_connection(self, link) -> None:
        try:
            if self.keypair is not None:
                chan = SecureChannel.accept(link, self.keypair, name=self.name,
                                             registry=self.registry)
            else:
                chan = PlainChannel(link)
            while not self._stop.is_set():
                body = chan.recv(timeout=None)
                if body is None:
                    break
                with self._lock:
                    reply = dispatch(self.handlers, body)
                chan.send(reply)
        except (TransportClosed, SecureChannelError, FrameError, TimeoutError) as exc:
            log.debug("rpc connection ended: %s", exc)
        finally:
            link.close()

    def stop(self) -> None:
        self._stop.set()
        self.listener.close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=1.0)


class RpcClient:
    """Blocking client. ``session_per_request`` opens a fresh channel per call."""

    def __init__(self, endpoint: str, *, secure: bool = True, session_per_request: bool = False,
                 network: MemoryNetwork | None = None, timeout: float = 10.0, link=None):
        self.endpoint = endpoint
        self.secure = secure
        self.session_per_request = session_per_request
        self.network = network
        self.timeout = timeout
        self.link_model = link
        self._chan = None
        self._lock = threading.Lock()

    def _open(self):
        if self.secure:
            if self.link_model is not None:
                raw = connect(self.endpoint, network=self.network, link=self.link_model)
                return SecureChannel.connect(raw, timeout=self.timeout)
            return SecureChannel.connect(self.endpoint, timeout=self.timeout, network=self.network)
        return PlainChannel(connect(self.endpoint, network=self.network, link=self.link_model))

    def call(self, method: str, *args: bytes) -> list[bytes]:
        with self._lock:
            try:
                if self._chan is None:
                    self._chan = self._open()
                reply = self._chan.request(encode_request(method, *args), self.timeout)
            except (OSError, SecureChannelError, TimeoutError) as exc:
                self._drop()
                raise ConnectionError(f"{self.endpoint}: {exc}") from exc
            if self.session_per_request:
                self._drop()
        return decode_reply(reply)

    def _drop(self) -> None:
        if self._chan is not None:
            try:
                self._chan.close()
            except Exception:
                pass
            self._chan = None

    def close(self) -> None:
        with self._lock:
            self._drop()
