"""Signed ledger transactions."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace

from ..wire import FrameError, decode_fields, decode_uint, encode_fields, encode_uint
from .accounts import ADDRESS_LEN, Account, derive_address, verify_signature

DIGEST_LEN = 32


class TxKind(enum.IntEnum):
    DEPLOY = 0
    GRANT_ENTITY = 1
    REVOKE_ENTITY = 2
    PUT_RECORD = 3


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    public_key: bytes
    kind: TxKind
    payload: bytes
    tx_nonce: int
    signature: bytes = b""
    _txid: bytes | None = field(default=None, compare=False, repr=False)

    def signing_bytes(self) -> bytes:
        return encode_fields(b"edgechain/tx/1", self.sender, self.public_key,
                             bytes([self.kind]), self.payload, encode_uint(self.tx_nonce))

    def encode(self) -> bytes:
        return encode_fields(self.sender, self.public_key, bytes([self.kind]), self.payload,
                             encode_uint(self.tx_nonce), self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        sender, pub, kind, payload, nonce, sig = decode_fields(data, 6)
        if len(kind) != 1:
            raise FrameError("bad tx kind")
        try:
            k = TxKind(kind[0])
        except ValueError:
            raise FrameError(f"unknown tx kind {kind[0]}") from None
        return cls(sender, pub, k, payload, decode_uint(nonce), sig)

    @property
    def txid(self) -> bytes:
        if self._txid is None:
            object.__setattr__(self, "_txid", hashlib.sha256(self.encode()).digest())
        return self._txid

    def signature_valid(self) -> bool:
        return (len(self.sender) == ADDRESS_LEN
                and derive_address(self.public_key) == self.sender
                and verify_signature(self.public_key, self.signature, self.signing_bytes()))

    def with_changes(self, **changes) -> "Transaction":
        return replace(self, _txid=None, **changes)


def sign_tx(account: Account, kind: TxKind, payload: bytes, nonce: int | None = None) -> Transaction:
    unsigned = Transaction(account.address, account.public_bytes, kind, payload,
                           account.next_nonce() if nonce is None else nonce)
    return unsigned.with_changes(signature=account.sign(unsigned.signing_bytes()))


def deploy_tx(owner: Account, nonce: int | None = None) -> Transaction:
    return sign_tx(owner, TxKind.DEPLOY, b"", nonce)


def grant_tx(owner: Account, entity: bytes, nonce: int | None = None) -> Transaction:
    return sign_tx(owner, TxKind.GRANT_ENTITY, entity, nonce)


def revoke_tx(owner: Account, entity: bytes, nonce: int | None = None) -> Transaction:
    return sign_tx(owner, TxKind.REVOKE_ENTITY, entity, nonce)


def put_record_tx(submitter: Account, segment_id: str, digest: bytes,
                  nonce: int | None = None) -> Transaction:
    return sign_tx(submitter, TxKind.PUT_RECORD, encode_record_payload(segment_id, digest), nonce)


def encode_record_payload(segment_id: str, digest: bytes) -> bytes:
    return encode_fields(segment_id.encode(), digest)


def decode_record_payload(payload: bytes) -> tuple[str, bytes]:
    sid, digest = decode_fields(payload, 2)
    if len(digest) != DIGEST_LEN:
        raise FrameError("record digest must be 32 bytes")
    return sid.decode(), digest
