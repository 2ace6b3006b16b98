"""Fog node: ingests edge batches, seals segments, anchors digests, answers queries."""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field

from .channel import ChannelError
from .features import FeatureRecord, parse_feature_file
from .index import (
    ContextConfig,
    IndexSegment,
    IndexStore,
    QueryResult,
    QuerySpec,
    SealedError,
    contextualize,
)
from .ledger.accounts import Account
from .ledger.contract import Rejected
from .ledger.tx import put_record_tx

log = logging.getLogger(__name__)


@dataclass
class AnchorReceipt:
    segment_id: str
    digest: bytes
    txid: bytes | None
    error: str | None = None


@dataclass
class FogNode:
    name: str
    account: Account
    context: ContextConfig
    store: IndexStore
    chain: object = None
    seal_grace_ms: int = 1_000
    anchored: dict[str, AnchorReceipt] = field(default_factory=dict)
    rejected_frames: list[str] = field(default_factory=list)
    _latest: dict[str, int] = field(default_factory=dict)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def vid(self) -> bytes:
        return self.account.address

    def ingest(self, batch: list[FeatureRecord]) -> list[IndexSegment]:
        """Contextualize and store one batch; return segments sealed by the new watermark."""
        with self._lock:
            return self._ingest(batch)

    def _ingest(self, batch: list[FeatureRecord]) -> list[IndexSegment]:
        for rec in batch:
            try:
                self.store.insert(contextualize(rec, self.context))
            except SealedError:
                log.warning("late record for sealed window dropped: %s", rec.to_line())
            self._latest[rec.camera_id] = max(self._latest.get(rec.camera_id, 0), rec.timestamp)
        sealed = []
        for seg in self.store.segments():
            latest = self._latest.get(seg.camera_id)
            if not seg.sealed and latest is not None \
                    and seg.window[1] + self.seal_grace_ms <= latest:
                sealed.append(self.store.seal_segment(seg.segment_id))
        return sealed

    def serve_channel(self, channel, timeout: float | None = 10.0) -> list[IndexSegment]:
        """Consume a stream until the edge closes, then seal its cameras' open segments.

        Replayed or forged frames are dropped and counted; the session stays up.
        """
        sealed, cameras = [], set()
        while True:
            try:
                payload = channel.recv(timeout)
            except ChannelError as exc:
                if exc.kind not in ("Replay", "TamperDetected"):
                    raise
                log.warning("%s: dropped frame (%s)", self.name, exc.kind)
                self.rejected_frames.append(exc.kind)
                continue
            if payload is None:
                break
            batch = parse_feature_file(payload.decode())
            cameras.update(r.camera_id for r in batch)
            sealed.extend(self.ingest(batch))
        with self._lock:
            for cam in sorted(cameras):
                sealed.extend(self.store.seal_all(cam))
        return sealed

    def anchor(self, segments: list[IndexSegment]) -> list[AnchorReceipt]:
        with self._lock:
            return self._anchor(segments)

    def _anchor(self, segments: list[IndexSegment]) -> list[AnchorReceipt]:
        receipts = []
        if self.chain is not None:
            self.account.last_nonce = max(self.account.last_nonce,
                                          self.chain.nonce_of(self.account.address))
        for seg in segments:
            if seg.segment_id in self.anchored:
                continue
            tx = put_record_tx(self.account, seg.segment_id, seg.digest)
            try:
                txid = self.chain.submit_tx(tx)
                receipt = AnchorReceipt(seg.segment_id, seg.digest, txid)
            except Rejected as exc:
                self.account.last_nonce -= 1
                receipt = AnchorReceipt(seg.segment_id, seg.digest, None, exc.kind)
            self.anchored[seg.segment_id] = receipt
            receipts.append(receipt)
        return receipts

    def query(self, spec: QuerySpec) -> QueryResult:
        return self.store.query(spec)

    def segment_payloads(self, segment_ids) -> dict[str, bytes]:
        """Whole segments, as canonical bytes, for authenticated queries."""
        return {sid: self.store.get_segment(sid).canonical_bytes() for sid in segment_ids}


def spec_to_json(spec: QuerySpec) -> bytes:
    return json.dumps({k: v for k, v in vars(spec).items() if v is not None},
                      sort_keys=True).encode()


def spec_from_json(data: bytes) -> QuerySpec:
    raw = json.loads(data)
    for key in ("time_range", "speed_range", "direction_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return QuerySpec(**raw)


def fog_handlers(fog: FogNode) -> dict:
    """RPC surface the cloud uses to query a fog node."""

    def query(args):
        result = fog.query(spec_from_json(args[0]))
        lines = "\n".join(r.to_line() for r in result.records).encode()
        return [lines, "\n".join(result.segment_ids).encode()]

    def get_segments(args):
        ids = [s for s in args[0].decode().split("\n") if s]
        payloads = fog.segment_payloads(ids)
        out = []
        for sid in ids:
            out += [sid.encode(), payloads[sid]]
        return out

    return {"query": query, "get_segments": get_segments}
