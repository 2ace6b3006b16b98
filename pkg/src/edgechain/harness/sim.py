"""Discrete-event simulation of a proof-of-work miner network.

Time is virtual. Message delivery takes ``latency + U(0, jitter)``; a mining
job runs real proof of work from a seeded start nonce and completes after
``attempts / hashrate`` simulated seconds. Identical seeds give identical
event orders and chains.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from ..ledger.chain import Block, BlockHeader, ChainNode, InvalidBlock, MissingParent, solve_pow
from ..ledger.tx import Transaction

log = logging.getLogger(__name__)


class Simulator:
    def __init__(self, start_ms: int = 0):
        self.start_ms = start_ms
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()

    def clock_ms(self) -> int:
        return self.start_ms + round(self.now * 1000)

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        self.schedule_at(self.now + max(0.0, delay), fn, *args)

    def schedule_at(self, at: float, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (max(self.now, at), next(self._seq), fn, args))

    @property
    def idle(self) -> bool:
        return not self._queue

    def run(self, *, until: Callable[[], bool] | None = None, deadline: float | None = None) -> bool:
        """Process events until ``until()`` holds, the queue drains or ``deadline`` passes.

        Returns whether ``until`` was satisfied (or the queue drained, if no
        predicate was given).
        """
        while True:
            if until is not None and until():
                return True
            if not self._queue:
                return until is None
            t, _, fn, args = self._queue[0]
            if deadline is not None and t > deadline:
                self.now = deadline
                return False
            heapq.heappop(self._queue)
            self.now = t
            fn(*args)


@dataclass
class SimNetwork:
    """Point-to-point links between miners.

    Each directed link is FIFO, like the TCP connection it stands in for:
    jitter spreads delivery times but never reorders one peer's messages.
    """

    sim: Simulator
    latency_s: float
    jitter_s: float
    rng: random.Random
    dropped: Callable[[str, str, str, object], bool] = lambda src, dst, kind, payload: False
    delivered: int = 0
    _last: dict = field(default_factory=dict)

    def send(self, src: "SimMiner", dst: "SimMiner", kind: str, payload, fn: Callable) -> None:
        if self.dropped(src.name, dst.name, kind, payload):
            return
        delay = self.latency_s + (self.rng.uniform(0.0, self.jitter_s) if self.jitter_s else 0.0)
        at = max(self.sim.now + delay, self._last.get((src.name, dst.name), 0.0))
        self._last[(src.name, dst.name)] = at
        self.delivered += 1
        self.sim.schedule_at(at, fn, payload, src)


@dataclass
class MinerStats:
    blocks_found: int = 0
    attempts: int = 0
    restarts: int = 0
    orphans_fetched: int = 0


class SimMiner:
    """A ChainNode driven by the simulator, gossiping over a full mesh."""

    def __init__(self, name: str, sim: Simulator, net: SimNetwork, difficulty: int,
                 hashrate: float, seed: int, *, allow_empty_blocks: bool = False,
                 on_event: Callable[[str, str, dict], None] | None = None):
        self.name = name
        self.sim = sim
        self.net = net
        self.hashrate = hashrate
        self.node = ChainNode(name, difficulty, allow_empty_blocks=allow_empty_blocks,
                              clock=sim.clock_ms, seed=seed)
        self.peers: list[SimMiner] = []
        self.mining = False
        self.stats = MinerStats()
        self._job = 0
        self._busy = False
        self._on_event = on_event or (lambda actor, kind, detail: None)

    # ---- mining ---------------------------------------------------------
    def start_mining(self) -> None:
        self.mining = True
        if not self._busy:
            self._restart()

    def stop_mining(self) -> None:
        self.mining = False
        self._job += 1
        self._busy = False

    def _restart(self) -> None:
        self._job += 1
        self._busy = False
        if not self.mining:
            return
        cand = self.node.build_candidate()
        if cand is None:
            return
        header, txs = cand
        start = self.node.rng.getrandbits(64)
        nonce, attempts = solve_pow(header.height, header.prev_hash, header.tx_root,
                                    header.timestamp, self.node.difficulty, start)
        block = Block(BlockHeader(header.height, header.prev_hash, header.tx_root,
                                  header.timestamp, nonce), txs)
        self._busy = True
        self.stats.restarts += 1
        self.sim.schedule(attempts / self.hashrate, self._found, self._job, block, attempts)

    def _found(self, job: int, block: Block, attempts: int) -> None:
        if job != self._job:
            return  # superseded by a tip change
        self._busy = False
        self.stats.blocks_found += 1
        self.stats.attempts += attempts
        self.node.attempts_log.append(attempts)
        self.node.import_block(block, broadcast=False)
        self._on_event(self.name, "block_mined",
                       {"height": block.height, "hash": block.block_hash.hex(),
                        "txs": len(block.transactions)})
        for p in self.peers:
            self.net.send(self, p, "block", block, p.receive_block)
        self._restart()

    # ---- gossip ---------------------------------------------------------
    def receive_block(self, block: Block, origin: "SimMiner") -> None:
        try:
            changed = self.node.import_block(block, broadcast=False)
        except MissingParent as exc:
            self.stats.orphans_fetched += 1
            self.net.send(self, origin, "getblock", exc.parent_hash, origin.serve_block)
            return
        except InvalidBlock as exc:
            log.info("%s rejected block from %s: %s", self.name, origin.name, exc)
            return
        if changed:
            self._restart()

    def serve_block(self, block_hash: bytes, requester: "SimMiner") -> None:
        block = self.node.get_block(block_hash)
        if block is not None:
            self.net.send(self, requester, "block", block, requester.receive_block)

    def submit_tx(self, tx: Transaction) -> bytes:
        txid = self.node.submit_tx(tx, gossip=False)
        for p in self.peers:
            self.net.send(self, p, "tx", tx, p.receive_tx)
        if self.mining and not self._busy:
            self._restart()
        return txid

    def receive_tx(self, tx: Transaction, origin: "SimMiner") -> None:
        if self.node.receive_tx(tx) and self.mining and not self._busy:
            self._restart()


@dataclass
class SimChainClient:
    """ChainNode read/submit API bound to one simulated miner.

    ``drop`` lets a fault script swallow a submission in transit: the
    caller gets a txid back but no miner ever sees the transaction.
    """

    miner: SimMiner
    drop: Callable[[Transaction], bool] = lambda tx: False
    dropped: list[bytes] = field(default_factory=list)

    def submit_tx(self, tx: Transaction) -> bytes:
        if self.drop(tx):
            self.dropped.append(tx.txid)
            return tx.txid
        return self.miner.submit_tx(tx)

    def get_index_token(self, segment_id: str):
        return self.miner.node.get_index_token(segment_id)

    def tx_status(self, txid: bytes):
        return self.miner.node.tx_status(txid)

    def nonce_of(self, address: bytes) -> int:
        return self.miner.node.nonce_of(address)

    def get_tip(self):
        return self.miner.node.get_tip()


class MinerNetwork:
    """Full mesh of simulated miners."""

    def __init__(self, count: int, *, difficulty: int, hashrate: float, latency_s: float,
                 jitter_s: float, seed: int, start_ms: int = 0, allow_empty_blocks: bool = False,
                 names: list[str] | None = None,
                 on_event: Callable[[str, str, dict], None] | None = None):
        if count < 1:
            raise ValueError("at least one miner is required")
        names = names or [f"miner-{i}" for i in range(count)]
        self.sim = Simulator(start_ms)
        rng = random.Random(seed)
        self.net = SimNetwork(self.sim, latency_s, jitter_s, random.Random(rng.getrandbits(64)))
        self.miners = [SimMiner(names[i], self.sim, self.net, difficulty, hashrate,
                                rng.getrandbits(64), allow_empty_blocks=allow_empty_blocks,
                                on_event=on_event)
                       for i in range(count)]
        for m in self.miners:
            m.peers = [p for p in self.miners if p is not m]

    def start(self) -> None:
        for m in self.miners:
            m.start_mining()

    def stop(self) -> None:
        for m in self.miners:
            m.stop_mining()

    def tips(self) -> list[bytes]:
        return [m.node.tip for m in self.miners]

    def converged(self) -> bool:
        return len(set(self.tips())) == 1

    def mined_everywhere(self, txids) -> bool:
        return all(m.node.tx_status(t).state == "mined" for m in self.miners for t in txids)

    def settle(self, deadline: float | None = None) -> bool:
        """Stop mining, deliver every in-flight message, report convergence."""
        self.stop()
        drained = self.sim.run(deadline=deadline)
        return drained and self.converged()


@dataclass
class RaceResult:
    seed: int
    converged: bool
    heights: list[int]
    tips: list[str]
    blocks_found: int
    forks: int
    sim_seconds: float


def fork_race(seed: int, *, miners: int = 4, difficulty: int = 16, target_height: int = 8,
              hashrate: float = 250_000.0, latency_s: float = 0.010, jitter_s: float = 0.005,
              timeout_s: float = 600.0) -> RaceResult:
    """Miners race on empty blocks until one reaches ``target_height``, then settle."""
    net = MinerNetwork(miners, difficulty=difficulty, hashrate=hashrate, latency_s=latency_s,
                       jitter_s=jitter_s, seed=seed, allow_empty_blocks=True)
    net.start()
    net.sim.run(until=lambda: max(m.node.height for m in net.miners) >= target_height,
                deadline=timeout_s)
    converged = net.settle(deadline=timeout_s)
    found = sum(m.stats.blocks_found for m in net.miners)
    main = net.miners[0].node.height
    return RaceResult(seed, converged, [m.node.height for m in net.miners],
                      [t.hex() for t in net.tips()], found, found - main, net.sim.now)
