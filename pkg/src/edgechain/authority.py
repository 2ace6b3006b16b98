"""Cloud-node role: entity registration, record-permission policy, query verification."""
from __future__ import annotations

import enum
import hashlib
import hmac
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .index import ContextualizedRecord, QuerySpec, canonical_bytes, is_canonical, parse_canonical
from .ledger.accounts import ADDRESS_LEN, Account
from .ledger.contract import ABI_FUNCTIONS, CONTRACT_ADDRESS, IndexToken
from .ledger.tx import deploy_tx, grant_tx, revoke_tx


class EntityRole(enum.Enum):
    FOG = "Fog"
    EDGE = "Edge"
    CLOUD = "Cloud"


class EntityStatus(enum.Enum):
    PENDING = "Pending"
    VERIFIED = "Verified"
    REVOKED = "Revoked"


class RegistrationError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class AuthError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


@dataclass
class ProfileEntry:
    vid: bytes
    name: str
    role: EntityRole
    status: EntityStatus
    registered_at: int

    def to_json(self) -> dict:
        return {"vid": self.vid.hex(), "name": self.name, "role": self.role.value,
                "status": self.status.value, "registered_at": self.registered_at}


class ProfileDatabase:
    """Profile store keyed by VID, optionally backed by an append-only journal.

    VIDs on the allowlist are verified on registration; everyone else stays
    pending until :meth:`verify` is called.
    """

    def __init__(self, allowlist: Iterable[bytes] = (), journal_path: str | None = None,
                 clock=lambda: int(time.time() * 1000)):
        self.allowlist = set(allowlist)
        self.clock = clock
        self._entries: dict[bytes, ProfileEntry] = {}
        self._lock = threading.Lock()
        self._journal_path = journal_path
        if journal_path and Path(journal_path).exists():
            self._replay(journal_path)

    def _replay(self, path: str) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                ev = json.loads(line)
                vid = bytes.fromhex(ev["vid"])
                if ev["op"] == "register":
                    self._entries[vid] = ProfileEntry(vid, ev["name"], EntityRole(ev["role"]),
                                                      EntityStatus(ev["status"]),
                                                      ev["registered_at"])
                else:
                    self._entries[vid].status = EntityStatus(ev["status"])

    def _log(self, event: dict) -> None:
        if self._journal_path:
            with open(self._journal_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    def register_entity(self, vid: bytes, name: str, role: EntityRole) -> ProfileEntry:
        if len(vid) != ADDRESS_LEN:
            raise RegistrationError("Malformed", f"VID must be {ADDRESS_LEN} bytes")
        with self._lock:
            if vid in self._entries:
                raise RegistrationError("Duplicate", vid.hex())
            status = EntityStatus.VERIFIED if vid in self.allowlist else EntityStatus.PENDING
            entry = ProfileEntry(vid, name, role, status, self.clock())
            self._entries[vid] = entry
            self._log({"op": "register", **entry.to_json()})
            return entry

    def _set_status(self, vid: bytes, status: EntityStatus) -> ProfileEntry:
        with self._lock:
            entry = self._entries.get(vid)
            if entry is None:
                raise RegistrationError("Unknown", vid.hex())
            entry.status = status
            self._log({"op": "status", "vid": vid.hex(), "status": status.value})
            return entry

    def verify(self, vid: bytes) -> ProfileEntry:
        return self._set_status(vid, EntityStatus.VERIFIED)

    def revoke(self, vid: bytes) -> ProfileEntry:
        return self._set_status(vid, EntityStatus.REVOKED)

    def get(self, vid: bytes) -> ProfileEntry | None:
        with self._lock:
            return self._entries.get(vid)

    def entries(self) -> list[ProfileEntry]:
        with self._lock:
            return sorted(self._entries.values(), key=lambda e: e.vid)


@dataclass
class Decision:
    granted: bool
    reason: str
    txid: bytes | None = None


@dataclass(frozen=True)
class PermissionGrant:
    """What the fog node is told once its grant is on chain."""

    contract_address: bytes
    abi_function: str
    height: int


class Verdict(enum.Enum):
    AUTHENTIC = "Authentic"
    TAMPERED_OR_UNKNOWN = "TamperedOrUnknown"


@dataclass(frozen=True)
class AuthResult:
    segment_id: str
    verdict: Verdict
    local_digest: bytes
    chain_digest: bytes | None
    chain_height: int | None

    def line(self) -> str:
        chain = self.chain_digest.hex() if self.chain_digest else "-"
        height = "-" if self.chain_height is None else str(self.chain_height)
        return f"{self.segment_id} {self.verdict.value} local={self.local_digest.hex()} " \
               f"chain={chain} height={height}"


def process_segment(content: bytes | Sequence[ContextualizedRecord]) -> bytes | None:
    """Canonical bytes of a returned segment, or ``None`` if it is not canonical.

    Byte content must parse and re-render to exactly itself. Numeric parsing
    tolerates spellings such as `` 1`` or ``1_0``, so without the round-trip
    check a mutated byte could collapse back onto the anchored form.
    """
    if isinstance(content, (bytes, bytearray)):
        data = bytes(content)
        return data if is_canonical(data) else None
    return canonical_bytes(content)


def digest_segment(content: bytes | Sequence[ContextualizedRecord]) -> tuple[bytes, bool]:
    """Local digest of a returned segment and whether it was canonical.

    Rejected content is hashed as received so the result line still shows
    what was checked.
    """
    canonical = process_segment(content)
    if canonical is None:
        return hashlib.sha256(bytes(content)).digest(), False
    return hashlib.sha256(canonical).digest(), True


def verify_digest(local: bytes, token: IndexToken | None) -> bool:
    return token is not None and hmac.compare_digest(local, token.digest)


def fetch_token(chain, segment_id: str) -> IndexToken | None:
    try:
        return chain.get_index_token(segment_id)
    except (ConnectionError, OSError, TimeoutError) as exc:
        raise AuthError("ChainUnavailable", str(exc)) from exc


def judge(segment_id: str, content, token: IndexToken | None) -> AuthResult:
    local, parsed = digest_segment(content)
    ok = parsed and verify_digest(local, token)
    return AuthResult(segment_id, Verdict.AUTHENTIC if ok else Verdict.TAMPERED_OR_UNKNOWN, local,
                      token.digest if token else None, token.height if token else None)


def authenticate_query(segments: Mapping[str, bytes | Sequence[ContextualizedRecord]],
                       chain) -> list[AuthResult]:
    """Check every covering segment against its on-chain index token.

    ``segments`` maps segment id to the whole segment as returned by the fog
    node (canonical bytes or records). Raises AuthError(ChainUnavailable)
    without any verdict if the chain cannot be reached.
    """
    tokens = {sid: fetch_token(chain, sid) for sid in sorted(segments)}
    return [judge(sid, segments[sid], tokens[sid]) for sid in sorted(segments)]


def all_authentic(results: Iterable[AuthResult]) -> bool:
    results = list(results)
    return bool(results) and all(r.verdict is Verdict.AUTHENTIC for r in results)


def filter_verified(spec: QuerySpec, segments: Mapping[str, bytes], results: Sequence[AuthResult]
                    ) -> list[ContextualizedRecord]:
    """Client-side filtering of authentic segments after verification."""
    ok = {r.segment_id for r in results if r.verdict is Verdict.AUTHENTIC}
    out = []
    for sid in sorted(ok):
        out.extend(r for r in parse_canonical(segments[sid]) if spec.matches(r))
    out.sort(key=lambda r: (r.sort_key, r.to_line()))
    return out


class Authority:
    """Policy owner: deploys the contract and grants record permission."""

    def __init__(self, account: Account, profiles: ProfileDatabase, chain):
        self.account = account
        self.profiles = profiles
        self.chain = chain

    def _sync_nonce(self) -> None:
        self.account.last_nonce = max(self.account.last_nonce,
                                      self.chain.nonce_of(self.account.address))

    def deploy(self) -> bytes:
        self._sync_nonce()
        return self.chain.submit_tx(deploy_tx(self.account))

    def decide_record_permission(self, vid: bytes) -> Decision:
        entry = self.profiles.get(vid)
        if entry is None:
            return Decision(False, "Unknown")
        if entry.status is EntityStatus.REVOKED:
            return Decision(False, "Revoked")
        if entry.role is not EntityRole.FOG:
            return Decision(False, "WrongRole")
        if entry.status is not EntityStatus.VERIFIED:
            return Decision(False, "NotVerified")
        self._sync_nonce()
        txid = self.chain.submit_tx(grant_tx(self.account, vid))
        return Decision(True, "Granted", txid)

    def notify(self, decision: Decision) -> PermissionGrant | None:
        """Contract address and ABI entry point, once the grant is mined."""
        if not decision.granted or decision.txid is None:
            return None
        status = self.chain.tx_status(decision.txid)
        if status.state != "mined":
            return None
        return PermissionGrant(CONTRACT_ADDRESS, ABI_FUNCTIONS[2], status.height)

    def revoke(self, vid: bytes) -> bytes:
        self.profiles.revoke(vid)
        self._sync_nonce()
        return self.chain.submit_tx(revoke_tx(self.account, vid))
