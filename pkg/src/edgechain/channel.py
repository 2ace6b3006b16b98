"""Hybrid secure channel between two nodes.

The initiator (edge) and responder (fog) run a six-message handshake:

1. initiator -> HELLO(session_id, initiator_nonce)
2. responder -> CERT_REPLY(session_id, node_name, public key DER)
3. initiator -> KEY_TRANSPORT(session_id, RSA-OAEP(shared_key || nonce))
4. responder -> KEY_CONFIRM(session_id, SHA-256(shared_key || nonce))
5. initiator -> ACK(session_id)
6. either    -> CLOSE(session_id), after which the shared key is wiped

Data frames carry AES-256-GCM ciphertext of ``counter || plaintext``.
The protocol functions below are frame-in/frame-out; :class:`SecureChannel`
drives them over a transport.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import json
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import transport as _transport
from .wire import Frame, FrameError, FrameType, decode_fields, encode_fields

SESSION_ID_LEN = 16
NONCE_LEN = 16
KEY_LEN = 32
DIGEST_LEN = 32
GCM_NONCE_LEN = 12
COUNTER_LEN = 8
DEFAULT_KEY_BITS = 2048

OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()),
                    algorithm=hashes.SHA256(), label=None)

Randomness = Callable[[int], bytes]


class Phase(enum.Enum):
    IDLE = "Idle"
    HELLO_SENT = "HelloSent"
    CERT_RECEIVED = "CertReceived"
    KEY_SENT = "KeySent"
    CONFIRMED = "Confirmed"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


class Role(enum.Enum):
    INITIATOR = "Initiator"
    RESPONDER = "Responder"


class SecureChannelError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class HandshakeError(SecureChannelError):
    """kind is one of Transport, Busy, BadCertificate, KeyConfirmMismatch."""


class ProtocolViolation(SecureChannelError):
    def __init__(self, message: str = ""):
        super().__init__("ProtocolViolation", message)


class ChannelError(SecureChannelError):
    """kind is one of NotEstablished, TamperDetected, Replay."""


@dataclass
class KeyPair:
    private_key: rsa.RSAPrivateKey

    @classmethod
    def generate(cls, bits: int = DEFAULT_KEY_BITS) -> "KeyPair":
        return cls(rsa.generate_private_key(public_exponent=65537, key_size=bits))

    @classmethod
    def from_pem(cls, pem: bytes) -> "KeyPair":
        return cls(serialization.load_pem_private_key(pem, password=None))

    def to_pem(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption())

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self.private_key.public_key()

    @property
    def public_bytes(self) -> bytes:
        return public_key_bytes(self.public_key)


def public_key_bytes(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.DER,
                            serialization.PublicFormat.SubjectPublicKeyInfo)


def make_certificate(name: str, keypair: KeyPair) -> bytes:
    """The "certificate" is the node name plus its DER public key; no CA."""
    return encode_fields(name.encode(), keypair.public_bytes)


def parse_certificate(cert: bytes) -> tuple[str, rsa.RSAPublicKey]:
    try:
        name, der = decode_fields(cert, 2)
        key = serialization.load_der_public_key(der)
        if not isinstance(key, rsa.RSAPublicKey):
            raise ValueError("not an RSA key")
        return name.decode(), key
    except (FrameError, ValueError, UnicodeDecodeError) as exc:
        raise HandshakeError("BadCertificate", str(exc)) from exc


def key_digest(shared_key: bytes, initiator_nonce: bytes) -> bytes:
    return hashlib.sha256(bytes(shared_key) + initiator_nonce).digest()


class SessionRegistry:
    """Session ids known to one node: in-flight initiations and responder history."""

    def __init__(self):
        self._lock = threading.Lock()
        self.in_flight: set[bytes] = set()
        self.seen: set[bytes] = set()

    def claim(self, session_id: bytes) -> None:
        with self._lock:
            if session_id in self.in_flight:
                raise HandshakeError("Busy", f"session {session_id.hex()} already in flight")
            self.in_flight.add(session_id)

    def release(self, session_id: bytes) -> None:
        with self._lock:
            self.in_flight.discard(session_id)

    def admit(self, session_id: bytes) -> bool:
        with self._lock:
            if session_id in self.seen:
                return False
            self.seen.add(session_id)
            return True


DEFAULT_REGISTRY = SessionRegistry()


@dataclass
class SessionState:
    role: Role
    session_id: bytes = b""
    phase: Phase = Phase.IDLE
    shared_key: bytearray | None = field(default=None, repr=False)
    peer_public_key: Any = field(default=None, repr=False)
    peer_name: str | None = None
    initiator_nonce: bytes = b""
    send_counter: int = 0
    recv_counter: int = 0
    keypair: KeyPair | None = field(default=None, repr=False)
    name: str = ""
    registry: SessionRegistry = field(default=DEFAULT_REGISTRY, repr=False)
    transport: Any = field(default=None, repr=False)
    _aead: AESGCM | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        peer = public_key_bytes(self.peer_public_key).hex() if self.peer_public_key else None
        return {
            "role": self.role.value,
            "session_id": self.session_id.hex(),
            "phase": self.phase.value,
            "shared_key": bytes(self.shared_key).hex() if self.shared_key is not None else None,
            "peer_public_key": peer,
            "peer_name": self.peer_name,
            "initiator_nonce": self.initiator_nonce.hex(),
            "send_counter": self.send_counter,
            "recv_counter": self.recv_counter,
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    def _set_key(self, key: bytes) -> None:
        self.shared_key = bytearray(key)
        self._aead = AESGCM(bytes(key))

    def _wipe_key(self) -> None:
        if self.shared_key is not None:
            for i in range(len(self.shared_key)):
                self.shared_key[i] = 0
        self.shared_key = None
        self._aead = None


def new_responder(keypair: KeyPair, name: str = "fog",
                  registry: SessionRegistry | None = None) -> SessionState:
    return SessionState(role=Role.RESPONDER, keypair=keypair, name=name,
                        registry=registry or SessionRegistry())


def _violation(state: SessionState, message: str) -> ProtocolViolation:
    _abort(state)
    return ProtocolViolation(message)


def _abort(state: SessionState) -> None:
    state._wipe_key()
    if state.role is Role.INITIATOR and state.session_id:
        state.registry.release(state.session_id)
    state.phase = Phase.CLOSED


def _check_session(state: SessionState, frame: Frame, nfields: int) -> list[bytes]:
    try:
        fields = decode_fields(frame.body, nfields)
    except FrameError as exc:
        raise _violation(state, f"malformed {frame.frame_type.name}: {exc}") from exc
    if fields[0] != state.session_id:
        raise _violation(state, "session id mismatch")
    return fields


def initiate_handshake(peer, *, rng: Randomness = os.urandom,
                       registry: SessionRegistry | None = None,
                       network: _transport.MemoryNetwork | None = None) -> SessionState:
    """Open (or take) a transport to ``peer`` and send HELLO.

    ``peer`` is an endpoint string or an already-open transport.
    """
    registry = registry or DEFAULT_REGISTRY
    if isinstance(peer, str):
        try:
            link = _transport.connect(peer, network=network)
        except (OSError, ValueError) as exc:
            raise HandshakeError("Transport", str(exc)) from exc
    else:
        link = peer
    session_id = rng(SESSION_ID_LEN)
    nonce = rng(NONCE_LEN)
    registry.claim(session_id)
    state = SessionState(role=Role.INITIATOR, session_id=session_id,
                         initiator_nonce=nonce, registry=registry, transport=link)
    try:
        link.send_frame(Frame(FrameType.HELLO, encode_fields(session_id, nonce)))
    except ConnectionError as exc:
        _abort(state)
        raise HandshakeError("Transport", str(exc)) from exc
    state.phase = Phase.HELLO_SENT
    return state


def respond_with_certificate(state: SessionState, hello: Frame) -> Frame:
    if state.role is not Role.RESPONDER or state.phase is not Phase.IDLE:
        raise _violation(state, f"unexpected HELLO in {state.phase.value}")
    if hello.frame_type is not FrameType.HELLO:
        raise _violation(state, f"expected HELLO, got {hello.frame_type.name}")
    try:
        session_id, nonce = decode_fields(hello.body, 2)
    except FrameError as exc:
        raise _violation(state, f"malformed HELLO: {exc}") from exc
    if len(session_id) != SESSION_ID_LEN or len(nonce) != NONCE_LEN:
        raise _violation(state, "HELLO field length")
    if not state.registry.admit(session_id):
        raise _violation(state, f"replayed session id {session_id.hex()}")
    state.session_id = session_id
    state.initiator_nonce = nonce
    state.phase = Phase.HELLO_SENT
    return Frame(FrameType.CERT_REPLY,
                 encode_fields(session_id, make_certificate(state.name, state.keypair)))


def send_shared_key(state: SessionState, cert: Frame, *, rng: Randomness = os.urandom) -> Frame:
    if state.role is not Role.INITIATOR or state.phase is not Phase.HELLO_SENT \
            or cert.frame_type is not FrameType.CERT_REPLY:
        raise _violation(state, f"unexpected {cert.frame_type.name} in {state.phase.value}")
    _, cert_bytes = _check_session(state, cert, 2)
    try:
        state.peer_name, state.peer_public_key = parse_certificate(cert_bytes)
    except HandshakeError:
        _abort(state)
        raise
    state.phase = Phase.CERT_RECEIVED
    key = rng(KEY_LEN)
    sealed = state.peer_public_key.encrypt(key + state.initiator_nonce, OAEP)
    state._set_key(key)
    state.phase = Phase.KEY_SENT
    return Frame(FrameType.KEY_TRANSPORT, encode_fields(state.session_id, sealed))


def confirm_key(state: SessionState, key_transport: Frame) -> Frame:
    if state.role is not Role.RESPONDER or state.phase is not Phase.HELLO_SENT \
            or key_transport.frame_type is not FrameType.KEY_TRANSPORT:
        raise _violation(state, f"unexpected {key_transport.frame_type.name} in {state.phase.value}")
    _, sealed = _check_session(state, key_transport, 2)
    try:
        payload = state.keypair.private_key.decrypt(sealed, OAEP)
    except ValueError as exc:
        raise _violation(state, "key transport does not decrypt") from exc
    if len(payload) != KEY_LEN + NONCE_LEN:
        raise _violation(state, f"key transport payload is {len(payload)} bytes")
    key, nonce = payload[:KEY_LEN], payload[KEY_LEN:]
    if not hmac.compare_digest(nonce, state.initiator_nonce):
        raise _violation(state, "nonce in key transport does not match HELLO")
    state._set_key(key)
    state.phase = Phase.CONFIRMED
    return Frame(FrameType.KEY_CONFIRM,
                 encode_fields(state.session_id, key_digest(key, nonce)))


def verify_and_ack(state: SessionState, confirm: Frame) -> Frame:
    if state.role is not Role.INITIATOR or state.phase is not Phase.KEY_SENT \
            or confirm.frame_type is not FrameType.KEY_CONFIRM:
        raise _violation(state, f"unexpected {confirm.frame_type.name} in {state.phase.value}")
    _, digest = _check_session(state, confirm, 2)
    expected = key_digest(state.shared_key, state.initiator_nonce)
    if not hmac.compare_digest(digest, expected):
        _abort(state)
        raise HandshakeError("KeyConfirmMismatch", "peer digest differs")
    state.phase = Phase.ESTABLISHED
    state.registry.release(state.session_id)
    return ack_frame(state)


def ack_frame(state: SessionState) -> Frame:
    """ACK for the current session; also used to retransmit a lost ACK."""
    return Frame(FrameType.ACK, encode_fields(state.session_id))


def accept_ack(state: SessionState, ack: Frame) -> None:
    if state.role is not Role.RESPONDER or state.phase not in (Phase.CONFIRMED, Phase.ESTABLISHED) \
            or ack.frame_type is not FrameType.ACK:
        raise _violation(state, f"unexpected {ack.frame_type.name} in {state.phase.value}")
    _check_session(state, ack, 1)
    state.phase = Phase.ESTABLISHED


def _gcm_nonce(role: Role, counter: int) -> bytes:
    direction = b"\x01" if role is Role.INITIATOR else b"\x02"
    return direction + b"\x00\x00\x00" + counter.to_bytes(COUNTER_LEN, "big")


def send_data(state: SessionState, plaintext: bytes) -> Frame:
    if state.phase is not Phase.ESTABLISHED or state._aead is None:
        raise ChannelError("NotEstablished", f"phase is {state.phase.value}")
    state.send_counter += 1
    counter = state.send_counter.to_bytes(COUNTER_LEN, "big")
    nonce = _gcm_nonce(state.role, state.send_counter)
    sealed = state._aead.encrypt(nonce, counter + plaintext, state.session_id)
    return Frame(FrameType.DATA, nonce + sealed)


def recv_data(state: SessionState, frame: Frame) -> bytes:
    if state.phase is not Phase.ESTABLISHED or state._aead is None:
        raise ChannelError("NotEstablished", f"phase is {state.phase.value}")
    if frame.frame_type is not FrameType.DATA:
        raise _violation(state, f"expected DATA, got {frame.frame_type.name}")
    body = frame.body
    peer_role = Role.RESPONDER if state.role is Role.INITIATOR else Role.INITIATOR
    if len(body) < GCM_NONCE_LEN + COUNTER_LEN + 16:
        raise ChannelError("TamperDetected", "data frame too short")
    nonce = body[:GCM_NONCE_LEN]
    if nonce[:4] != _gcm_nonce(peer_role, 0)[:4]:
        raise ChannelError("TamperDetected", "wrong direction tag")
    try:
        inner = state._aead.decrypt(nonce, memoryview(body)[GCM_NONCE_LEN:], state.session_id)
    except InvalidTag:
        raise ChannelError("TamperDetected", "authentication failed") from None
    counter = int.from_bytes(inner[:COUNTER_LEN], "big")
    if counter <= state.recv_counter:
        raise ChannelError("Replay", f"counter {counter} <= {state.recv_counter}")
    if counter != state.recv_counter + 1 or nonce[4:] != inner[:COUNTER_LEN]:
        raise ChannelError("TamperDetected", f"counter gap: got {counter}, "
                                             f"expected {state.recv_counter + 1}")
    state.recv_counter = counter
    return inner[COUNTER_LEN:]


def close_session(state: SessionState) -> Frame | None:
    """Wipe the key and move to Closed. Returns the CLOSE frame if one is due."""
    out = None
    if state.phase is Phase.ESTABLISHED:
        out = Frame(FrameType.CLOSE, encode_fields(state.session_id))
    _abort(state)
    return out


# (role, phase) -> frame types that are legal next inputs
EXPECTED: dict[tuple[Role, Phase], frozenset[FrameType]] = {
    (Role.INITIATOR, Phase.HELLO_SENT): frozenset({FrameType.CERT_REPLY}),
    (Role.INITIATOR, Phase.KEY_SENT): frozenset({FrameType.KEY_CONFIRM}),
    (Role.INITIATOR, Phase.ESTABLISHED): frozenset({FrameType.DATA, FrameType.CLOSE}),
    (Role.RESPONDER, Phase.IDLE): frozenset({FrameType.HELLO}),
    (Role.RESPONDER, Phase.HELLO_SENT): frozenset({FrameType.KEY_TRANSPORT}),
    (Role.RESPONDER, Phase.CONFIRMED): frozenset({FrameType.ACK}),
    (Role.RESPONDER, Phase.ESTABLISHED): frozenset({FrameType.DATA, FrameType.CLOSE, FrameType.ACK}),
}


def handle_frame(state: SessionState, frame: Frame, *, rng: Randomness = os.urandom):
    """Dispatch one inbound frame.

    Returns a reply :class:`Frame`, decrypted ``bytes`` for DATA, or ``None``.
    Any frame not legal in the current phase closes the session.
    """
    allowed = EXPECTED.get((state.role, state.phase), frozenset())
    if frame.frame_type not in allowed:
        raise _violation(state, f"{frame.frame_type.name} not expected in "
                                f"{state.role.value}/{state.phase.value}")
    ft = frame.frame_type
    if ft is FrameType.HELLO:
        return respond_with_certificate(state, frame)
    if ft is FrameType.CERT_REPLY:
        return send_shared_key(state, frame, rng=rng)
    if ft is FrameType.KEY_TRANSPORT:
        return confirm_key(state, frame)
    if ft is FrameType.KEY_CONFIRM:
        return verify_and_ack(state, frame)
    if ft is FrameType.ACK:
        accept_ack(state, frame)
        return None
    if ft is FrameType.DATA:
        return recv_data(state, frame)
    _check_session(state, frame, 1)
    close_session(state)
    return None


class SecureChannel:
    """A handshaken session bound to a transport."""

    def __init__(self, state: SessionState):
        self.state = state
        self.transport = state.transport

    @classmethod
    def connect(cls, peer, *, rng: Randomness = os.urandom, timeout: float | None = 10.0,
                registry: SessionRegistry | None = None,
                network: _transport.MemoryNetwork | None = None) -> "SecureChannel":
        state = initiate_handshake(peer, rng=rng, registry=registry, network=network)
        link = state.transport
        try:
            cert = link.recv_frame(timeout)
            link.send_frame(handle_frame(state, cert, rng=rng))
            confirm = link.recv_frame(timeout)
            link.send_frame(handle_frame(state, confirm))
        except (ConnectionError, TimeoutError) as exc:
            _abort(state)
            raise HandshakeError("Transport", str(exc)) from exc
        return cls(state)

    @classmethod
    def accept(cls, link, keypair: KeyPair, *, name: str = "fog", timeout: float | None = 10.0,
               registry: SessionRegistry | None = None) -> "SecureChannel":
        state = new_responder(keypair, name, registry)
        state.transport = link
        try:
            for _ in range(2):
                reply = handle_frame(state, link.recv_frame(timeout))
                link.send_frame(reply)
            handle_frame(state, link.recv_frame(timeout))
        except (ConnectionError, TimeoutError) as exc:
            _abort(state)
            raise HandshakeError("Transport", str(exc)) from exc
        return cls(state)

    def send(self, plaintext: bytes) -> int:
        frame = send_data(self.state, plaintext)
        self.transport.send_frame(frame)
        return len(frame.body) + 5

    def recv(self, timeout: float | None = None) -> bytes | None:
        """Next plaintext, or ``None`` once the peer sends CLOSE."""
        while True:
            frame = self.transport.recv_frame(timeout)
            if frame.frame_type is FrameType.ACK and self.state.phase is Phase.ESTABLISHED:
                handle_frame(self.state, frame)
                continue
            out = handle_frame(self.state, frame)
            if frame.frame_type is FrameType.CLOSE:
                return None
            return out

    def request(self, payload: bytes, timeout: float | None = 10.0) -> bytes:
        self.send(payload)
        reply = self.recv(timeout)
        if reply is None:
            raise ChannelError("NotEstablished", "peer closed during request")
        return reply

    def close(self) -> None:
        frame = close_session(self.state)
        if frame is not None:
            try:
                self.transport.send_frame(frame)
            except ConnectionError:
                pass
        self.transport.close()

    @property
    def established(self) -> bool:
        return self.state.phase is Phase.ESTABLISHED


class PlainChannel:
    """Same interface as :class:`SecureChannel`, no cryptography."""

    def __init__(self, link):
        self.transport = link
        self.open = True

    def send(self, payload: bytes) -> int:
        if not self.open:
            raise ChannelError("NotEstablished", "plain channel closed")
        frame = Frame(FrameType.DATA, payload)
        self.transport.send_frame(frame)
        return len(payload) + 5

    def recv(self, timeout: float | None = None) -> bytes | None:
        frame = self.transport.recv_frame(timeout)
        if frame.frame_type is FrameType.CLOSE:
            self.open = False
            return None
        if frame.frame_type is not FrameType.DATA:
            raise ProtocolViolation(f"plain channel got {frame.frame_type.name}")
        return frame.body

    def request(self, payload: bytes, timeout: float | None = 10.0) -> bytes:
        self.send(payload)
        reply = self.recv(timeout)
        if reply is None:
            raise ChannelError("NotEstablished", "peer closed during request")
        return reply

    def close(self) -> None:
        if self.open:
            self.open = False
            try:
                self.transport.send_frame(Frame(FrameType.CLOSE))
            except ConnectionError:
                pass
        self.transport.close()

    @property
    def established(self) -> bool:
        return self.open


def handshake_pair(client_link, server_link, keypair: KeyPair, *, name: str = "fog",
                   rng: Randomness = os.urandom, registry: SessionRegistry | None = None,
                   server_registry: SessionRegistry | None = None
                   ) -> tuple[SecureChannel, SecureChannel]:
    """Run the full handshake over two buffered in-memory ends from one thread."""
    client = initiate_handshake(client_link, rng=rng, registry=registry or SessionRegistry())
    server = new_responder(keypair, name, server_registry)
    server.transport = server_link
    server_link.send_frame(handle_frame(server, server_link.recv_frame(0)))
    client_link.send_frame(handle_frame(client, client_link.recv_frame(0), rng=rng))
    server_link.send_frame(handle_frame(server, server_link.recv_frame(0)))
    client_link.send_frame(handle_frame(client, client_link.recv_frame(0)))
    handle_frame(server, server_link.recv_frame(0))
    return SecureChannel(client), SecureChannel(server)


def preshared_channel(link, psk: bytes, session_id: bytes, role: Role) -> SecureChannel:
    """An Established channel with no handshake: the symmetric-only baseline.

    The session key is SHA-256(psk || session_id), so each session id gets
    its own key and counter-based GCM nonces never repeat under one key.
    """
    if len(session_id) != SESSION_ID_LEN:
        raise ValueError(f"session id must be {SESSION_ID_LEN} bytes")
    state = SessionState(role=role, session_id=session_id, phase=Phase.ESTABLISHED,
                         registry=SessionRegistry(), transport=link)
    state._set_key(hashlib.sha256(psk + session_id).digest())
    return SecureChannel(state)


# OAEP-SHA256 leaves k - 2*32 - 2 bytes of plaintext per block.
def oaep_chunk_size(public_key: rsa.RSAPublicKey) -> int:
    return public_key.key_size // 8 - 2 * hashes.SHA256.digest_size - 2


def oaep_encrypt_chunks(public_key: rsa.RSAPublicKey, data: bytes) -> bytes:
    """Asymmetric-only transport: every chunk of ``data`` under RSA-OAEP."""
    step = oaep_chunk_size(public_key)
    return b"".join(public_key.encrypt(data[i:i + step], OAEP) for i in range(0, len(data), step))


def oaep_decrypt_chunks(keypair: KeyPair, blob: bytes) -> bytes:
    block = keypair.private_key.key_size // 8
    if len(blob) % block:
        raise ChannelError("TamperDetected", "ciphertext is not a whole number of blocks")
    try:
        return b"".join(keypair.private_key.decrypt(blob[i:i + block], OAEP)
                        for i in range(0, len(blob), block))
    except ValueError:
        raise ChannelError("TamperDetected", "OAEP decryption failed") from None
