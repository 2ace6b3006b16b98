"""The index-authentication contract as a state machine over transactions.

There is exactly one contract per network. Its state is a pure fold over
mined transactions: the owner edits the authorized-entity list, and
authorized entities append write-once index tokens keyed by segment id.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

from ..wire import FrameError
from .accounts import ADDRESS_LEN
from .tx import Transaction, TxKind, decode_record_payload

CONTRACT_ADDRESS = bytes.fromhex("00000000000000000000000000000000000e1dec")
ABI_FUNCTIONS = ("grant_entity", "revoke_entity", "put_record", "get_index_token")


class Rejected(Exception):
    """A transaction violates a ledger or contract rule.

    ``kind`` is one of BadSignature, BadNonce, Malformed, AlreadyDeployed,
    NotDeployed, NotOwner, NotAuthorized, DuplicateRecord.
    """

    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


@dataclass(frozen=True)
class IndexToken:
    digest: bytes
    height: int
    submitter: bytes


@dataclass
class ContractState:
    owner: bytes
    authorized: set[bytes] = field(default_factory=set)
    records: dict[str, IndexToken] = field(default_factory=dict)


@dataclass
class LedgerState:
    contract: ContractState | None = None
    nonces: dict[bytes, int] = field(default_factory=dict)

    def copy(self) -> "LedgerState":
        return copy.deepcopy(self)

    def check(self, tx: Transaction) -> None:
        """Raise :class:`Rejected` if ``tx`` cannot be applied to this state."""
        if not tx.signature_valid():
            raise Rejected("BadSignature", tx.txid.hex())
        last = self.nonces.get(tx.sender, 0)
        if tx.tx_nonce <= last:
            raise Rejected("BadNonce", f"nonce {tx.tx_nonce} <= {last}")
        c = self.contract
        if tx.kind is TxKind.DEPLOY:
            if c is not None:
                raise Rejected("AlreadyDeployed")
            if tx.payload:
                raise Rejected("Malformed", "deploy carries no payload")
            return
        if c is None:
            raise Rejected("NotDeployed")
        if tx.kind in (TxKind.GRANT_ENTITY, TxKind.REVOKE_ENTITY):
            if tx.sender != c.owner:
                raise Rejected("NotOwner")
            if len(tx.payload) != ADDRESS_LEN:
                raise Rejected("Malformed", "entity must be a 20-byte address")
            return
        if tx.kind is TxKind.PUT_RECORD:
            if tx.sender not in c.authorized:
                raise Rejected("NotAuthorized", tx.sender.hex())
            try:
                sid, _ = decode_record_payload(tx.payload)
            except (FrameError, UnicodeDecodeError) as exc:
                raise Rejected("Malformed", str(exc)) from None
            if sid in c.records:
                raise Rejected("DuplicateRecord", sid)
            return
        raise Rejected("Malformed", f"unknown kind {tx.kind}")

    def apply(self, tx: Transaction, height: int) -> None:
        self.check(tx)
        self.nonces[tx.sender] = tx.tx_nonce
        if tx.kind is TxKind.DEPLOY:
            self.contract = ContractState(owner=tx.sender)
        elif tx.kind is TxKind.GRANT_ENTITY:
            self.contract.authorized.add(tx.payload)
        elif tx.kind is TxKind.REVOKE_ENTITY:
            self.contract.authorized.discard(tx.payload)
        elif tx.kind is TxKind.PUT_RECORD:
            sid, digest = decode_record_payload(tx.payload)
            self.contract.records[sid] = IndexToken(digest, height, tx.sender)

    def token(self, segment_id: str) -> IndexToken | None:
        if self.contract is None:
            return None
        return self.contract.records.get(segment_id)


def replay(blocks) -> LedgerState:
    """Fold every transaction of ``blocks`` (genesis first) into a fresh state."""
    state = LedgerState()
    for block in blocks:
        for tx in block.transactions:
            state.apply(tx, block.header.height)
    return state
