"""Blocks, proof of work, chain validation and the per-node chain state."""
from __future__ import annotations

import functools
import hashlib
import random
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from ..wire import FrameError, decode_fields, encode_fields
from .contract import LedgerState, Rejected
from .merkle import merkle_root
from .tx import Transaction

HEADER = struct.Struct(">Q32s32sQQ")
ZERO_HASH = bytes(32)
DEFAULT_DIFFICULTY = 16


def meets_difficulty(block_hash: bytes, bits: int) -> bool:
    return int.from_bytes(block_hash, "big") >> (256 - bits) == 0 if bits else True


def leading_zero_bits(block_hash: bytes) -> int:
    value = int.from_bytes(block_hash, "big")
    return 256 - value.bit_length()


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    tx_root: bytes
    timestamp: int
    pow_nonce: int

    def encode(self) -> bytes:
        return HEADER.pack(self.height, self.prev_hash, self.tx_root, self.timestamp, self.pow_nonce)

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        if len(data) != HEADER.size:
            raise FrameError("bad header length")
        return cls(*HEADER.unpack(data))

    @property
    def block_hash(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()
    _hash: bytes | None = field(default=None, compare=False, repr=False)

    @property
    def block_hash(self) -> bytes:
        if self._hash is None:
            object.__setattr__(self, "_hash", self.header.block_hash)
        return self._hash

    @property
    def height(self) -> int:
        return self.header.height

    def computed_tx_root(self) -> bytes:
        return merkle_root([tx.txid for tx in self.transactions])

    def encode(self) -> bytes:
        return encode_fields(self.header.encode(), *(tx.encode() for tx in self.transactions))

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        fields = decode_fields(data)
        if not fields:
            raise FrameError("empty block")
        return cls(BlockHeader.decode(fields[0]),
                   tuple(Transaction.decode(f) for f in fields[1:]))


def solve_pow(height: int, prev_hash: bytes, tx_root: bytes, timestamp: int, difficulty: int,
              start_nonce: int = 0, max_attempts: int | None = None) -> tuple[int | None, int]:
    """Search nonces upward from ``start_nonce``. Returns ``(nonce or None, attempts)``."""
    prefix = hashlib.sha256(HEADER.pack(height, prev_hash, tx_root, timestamp, 0)[:-8])
    bound = 1 << (256 - difficulty)
    mask = (1 << 64) - 1
    nonce = start_nonce & mask
    attempts = 0
    while max_attempts is None or attempts < max_attempts:
        h = prefix.copy()
        h.update(nonce.to_bytes(8, "big"))
        attempts += 1
        if int.from_bytes(h.digest(), "big") < bound:
            return nonce, attempts
        nonce = (nonce + 1) & mask
    return None, attempts


@functools.lru_cache(maxsize=None)
def genesis_block(difficulty: int) -> Block:
    nonce, _ = solve_pow(0, ZERO_HASH, merkle_root([]), 0, difficulty)
    return Block(BlockHeader(0, ZERO_HASH, merkle_root([]), 0, nonce))


@dataclass(frozen=True)
class Violation:
    height: int
    kind: str
    detail: str = ""


def validate_chain(chain: Sequence[Block], difficulty: int) -> Violation | None:
    """Return the first violation found walking from genesis, or ``None``.

    Kinds: genesis, height, hash_link, pow, tx_root, signature, nonce,
    access (any contract rule).
    """
    if not chain:
        raise ValueError("chain is empty")
    genesis = genesis_block(difficulty)
    if chain[0].header != genesis.header or chain[0].transactions:
        return Violation(0, "genesis", "genesis block differs")
    state = LedgerState()
    prev = chain[0]
    for expected_height, block in enumerate(chain[1:], start=1):
        h = block.header
        if h.height != expected_height:
            return Violation(expected_height, "height", f"header says {h.height}")
        if h.prev_hash != prev.block_hash:
            return Violation(h.height, "hash_link")
        if not meets_difficulty(block.block_hash, difficulty):
            return Violation(h.height, "pow")
        if block.computed_tx_root() != h.tx_root:
            return Violation(h.height, "tx_root")
        for tx in block.transactions:
            try:
                state.apply(tx, h.height)
            except Rejected as exc:
                kind = {"BadSignature": "signature", "BadNonce": "nonce"}.get(exc.kind, "access")
                return Violation(h.height, kind, str(exc))
        prev = block
    return None


class MissingParent(Exception):
    def __init__(self, parent_hash: bytes):
        super().__init__(f"unknown parent {parent_hash.hex()}")
        self.parent_hash = parent_hash


class InvalidBlock(Exception):
    pass


@dataclass
class TxStatus:
    state: str  # pending | mined | rejected | unknown
    height: int | None = None
    reason: str | None = None


class ChainNode:
    """One node's view: block tree, fork choice, mempool, contract state at tip.

    Fork choice is the longest valid chain; equal heights go to the lower
    block hash. All mutation goes through one lock.
    """

    def __init__(self, name: str = "node", difficulty: int = DEFAULT_DIFFICULTY, *,
                 allow_empty_blocks: bool = False,
                 clock: Callable[[], int] | None = None, seed: int | None = None):
        self.name = name
        self.difficulty = difficulty
        self.allow_empty_blocks = allow_empty_blocks
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.rng = random.Random(seed)
        self._lock = threading.RLock()
        genesis = genesis_block(difficulty)
        self.blocks: dict[bytes, Block] = {genesis.block_hash: genesis}
        self.states: dict[bytes, LedgerState] = {genesis.block_hash: LedgerState()}
        self.tip: bytes = genesis.block_hash
        self.mempool: OrderedDict[bytes, Transaction] = OrderedDict()
        self.orphans: dict[bytes, list[Block]] = {}
        self.rejected: dict[bytes, str] = {}
        self._main_index: dict[bytes, int] = {}
        self.on_block: list[Callable[[Block], None]] = []
        self.on_tx: list[Callable[[Transaction], None]] = []
        self.attempts_log: list[int] = []
        self._pending_states: dict[bytes, LedgerState] = {}

    # ---- reads -------------------------------------------------------
    @property
    def tip_block(self) -> Block:
        return self.blocks[self.tip]

    @property
    def height(self) -> int:
        return self.tip_block.height

    @property
    def state(self) -> LedgerState:
        return self.states[self.tip]

    def chain(self) -> list[Block]:
        with self._lock:
            out = []
            h = self.tip
            while True:
                b = self.blocks[h]
                out.append(b)
                if b.height == 0:
                    break
                h = b.header.prev_hash
            out.reverse()
            return out

    def get_block(self, ref: bytes | int) -> Block | None:
        with self._lock:
            if isinstance(ref, int):
                chain = self.chain()
                return chain[ref] if 0 <= ref < len(chain) else None
            return self.blocks.get(ref)

    def get_tip(self) -> tuple[bytes, int]:
        with self._lock:
            return self.tip, self.height

    def get_index_token(self, segment_id: str):
        with self._lock:
            return self.state.token(segment_id)

    def contract_deployed(self) -> bool:
        with self._lock:
            return self.state.contract is not None

    def is_authorized(self, address: bytes) -> bool:
        with self._lock:
            c = self.state.contract
            return c is not None and address in c.authorized

    def tx_status(self, txid: bytes) -> TxStatus:
        with self._lock:
            if txid in self._main_index:
                return TxStatus("mined", self._main_index[txid])
            if txid in self.mempool:
                return TxStatus("pending")
            if txid in self.rejected:
                return TxStatus("rejected", reason=self.rejected[txid])
            return TxStatus("unknown")

    def nonce_of(self, address: bytes) -> int:
        """Highest nonce used by ``address`` on chain or in the mempool."""
        with self._lock:
            n = self.state.nonces.get(address, 0)
            for tx in self.mempool.values():
                if tx.sender == address:
                    n = max(n, tx.tx_nonce)
            return n

    # ---- transactions -----------------------------------------------
    def _ordered(self, txs: Iterable[Transaction]) -> list[Transaction]:
        """Arrival order, except each sender's transactions are put in nonce order.

        Gossip can deliver one sender's nonces out of order; a sender only
        ever swaps among the slots its own transactions already hold.
        """
        txs = list(txs)
        by_sender: dict[bytes, list[Transaction]] = {}
        for tx in txs:
            by_sender.setdefault(tx.sender, []).append(tx)
        for group in by_sender.values():
            group.sort(key=lambda t: t.tx_nonce, reverse=True)
        return [by_sender[tx.sender].pop() for tx in txs]

    def _apply_pending(self, txs: Iterable[Transaction]
                       ) -> tuple[LedgerState, dict[bytes, Rejected]]:
        state = self.state.copy()
        failed = {}
        for tx in self._ordered(txs):
            try:
                state.apply(tx, self.height + 1)
            except Rejected as exc:
                failed[tx.txid] = exc
        return state, failed

    def _pending_state(self) -> LedgerState:
        return self._apply_pending(self.mempool.values())[0]

    def submit_tx(self, tx: Transaction, *, gossip: bool = True) -> bytes:
        """Validate against tip plus pending transactions; raise Rejected or queue it."""
        with self._lock:
            if tx.txid in self.mempool or tx.txid in self._main_index:
                return tx.txid
            try:
                if any(t.sender == tx.sender and t.tx_nonce == tx.tx_nonce
                       for t in self.mempool.values()):
                    raise Rejected("BadNonce", f"nonce {tx.tx_nonce} already pending")
                _, failed = self._apply_pending([*self.mempool.values(), tx])
                if tx.txid in failed:
                    raise failed[tx.txid]
            except Rejected as exc:
                self.rejected[tx.txid] = exc.kind
                raise
            self.mempool[tx.txid] = tx
        if gossip:
            for cb in self.on_tx:
                cb(tx)
        return tx.txid

    def receive_tx(self, tx: Transaction) -> bool:
        try:
            self.submit_tx(tx, gossip=False)
        except Rejected:
            return False
        return True

    def force_mempool(self, tx: Transaction) -> None:
        """Queue a transaction without validation (fault injection)."""
        with self._lock:
            self.mempool[tx.txid] = tx

    def drop_tx(self, txid: bytes) -> None:
        with self._lock:
            self.mempool.pop(txid, None)

    # ---- mining -------------------------------------------------------
    def build_candidate(self, timestamp: int | None = None) -> tuple[BlockHeader, tuple[Transaction, ...]] | None:
        """Header template (nonce 0) over the valid mempool transactions.

        Invalid transactions are dropped from the mempool and recorded as
        rejected. Returns ``None`` when there is nothing to mine.
        """
        with self._lock:
            parent = self.tip_block
            state = self.state.copy()
            included = []
            for tx in self._ordered(self.mempool.values()):
                try:
                    state.apply(tx, parent.height + 1)
                except Rejected as exc:
                    self.rejected[tx.txid] = exc.kind
                    del self.mempool[tx.txid]
                    continue
                included.append(tx)
            if not included and not self.allow_empty_blocks:
                return None
            ts = self.clock() if timestamp is None else timestamp
            header = BlockHeader(parent.height + 1, parent.block_hash,
                                 merkle_root([t.txid for t in included]), ts, 0)
            return header, tuple(included)

    def mine_block(self, *, timestamp: int | None = None, max_attempts: int | None = None,
                   start_nonce: int | None = None) -> Block | None:
        """Build a candidate, solve its proof of work and import it.

        Returns ``None`` if there is nothing to mine, if ``max_attempts``
        ran out, or if the tip moved while solving.
        """
        cand = self.build_candidate(timestamp)
        if cand is None:
            return None
        header, txs = cand
        start = self.rng.getrandbits(64) if start_nonce is None else start_nonce
        nonce, attempts = solve_pow(header.height, header.prev_hash, header.tx_root,
                                    header.timestamp, self.difficulty, start, max_attempts)
        if nonce is None:
            return None
        self.attempts_log.append(attempts)
        block = Block(BlockHeader(header.height, header.prev_hash, header.tx_root,
                                  header.timestamp, nonce), txs)
        with self._lock:
            if header.prev_hash != self.tip:
                return None
            self.import_block(block, broadcast=True)
        return block

    # ---- block import ---------------------------------------------------
    def import_block(self, block: Block, *, broadcast: bool = True) -> bool:
        """Validate and store a block. Returns True if the tip changed.

        Raises MissingParent (block kept as orphan) or InvalidBlock.
        """
        with self._lock:
            bh = block.block_hash
            if bh in self.blocks:
                return False
            parent_hash = block.header.prev_hash
            if parent_hash not in self.blocks:
                self.orphans.setdefault(parent_hash, []).append(block)
                raise MissingParent(parent_hash)
            self._validate_against_parent(block)
            old_tip = self.tip
            self._store(block)
            changed = self._attach_orphans(bh)
            if self.tip != old_tip:
                self._reorg(old_tip)
        if broadcast:
            for cb in self.on_block:
                cb(block)
        return self.tip != old_tip or changed

    def _validate_against_parent(self, block: Block) -> None:
        parent = self.blocks[block.header.prev_hash]
        if block.header.height != parent.height + 1:
            raise InvalidBlock("height does not follow parent")
        if not meets_difficulty(block.block_hash, self.difficulty):
            raise InvalidBlock("insufficient proof of work")
        if block.computed_tx_root() != block.header.tx_root:
            raise InvalidBlock("tx_root mismatch")
        state = self.states[parent.block_hash].copy()
        for tx in block.transactions:
            try:
                state.apply(tx, block.header.height)
            except Rejected as exc:
                raise InvalidBlock(f"transaction {tx.txid.hex()[:12]}: {exc}") from None
        self._pending_states[block.block_hash] = state

    def _store(self, block: Block) -> None:
        bh = block.block_hash
        self.blocks[bh] = block
        self.states[bh] = self._pending_states.pop(bh)
        tip = self.tip_block
        if (block.height, _neg(bh)) > (tip.height, _neg(tip.block_hash)):
            self.tip = bh

    def _attach_orphans(self, parent_hash: bytes) -> bool:
        changed = False
        queue = [parent_hash]
        while queue:
            ph = queue.pop()
            for child in self.orphans.pop(ph, []):
                try:
                    self._validate_against_parent(child)
                except InvalidBlock:
                    continue
                old = self.tip
                self._store(child)
                changed |= old != self.tip
                queue.append(child.block_hash)
        return changed

    def _reorg(self, old_tip: bytes) -> None:
        old_txs = {}
        h = old_tip
        new_chain = self.chain()
        new_hashes = {b.block_hash for b in new_chain}
        while h not in new_hashes:
            b = self.blocks[h]
            for tx in b.transactions:
                old_txs[tx.txid] = tx
            h = b.header.prev_hash
        self._main_index = {tx.txid: b.height for b in new_chain for tx in b.transactions}
        for txid, tx in old_txs.items():
            if txid not in self._main_index and txid not in self.mempool:
                self.mempool[txid] = tx
        for txid in list(self.mempool):
            if txid in self._main_index:
                del self.mempool[txid]


def _neg(block_hash: bytes) -> int:
    # lower hash wins ties, so compare on the negated value
    return -int.from_bytes(block_hash, "big")


def rebuild_chain(blocks: Iterable[Block], difficulty: int, *, remine_from: int = 1,
                  recompute_root: bool = True, rng: random.Random | None = None) -> list[Block]:
    """Re-link and re-mine blocks from ``remine_from`` onwards.

    Used to build tamper corpora where only one rule is broken.
    """
    rng = rng or random.Random(0)
    out: list[Block] = []
    for b in blocks:
        if b.height < remine_from or not out:
            out.append(b)
            continue
        h = b.header
        prev = out[-1].block_hash
        root = b.computed_tx_root() if recompute_root else h.tx_root
        nonce, _ = solve_pow(h.height, prev, root, h.timestamp, difficulty, rng.getrandbits(64))
        out.append(Block(BlockHeader(h.height, prev, root, h.timestamp, nonce), b.transactions))
    return out
