"""End-to-end scenario: registration, deploy, grant, stream, anchor, query, verify."""
from __future__ import annotations

import contextlib
import json
import random
import time
from dataclasses import dataclass, field

from ..authority import (
    Authority,
    AuthResult,
    EntityRole,
    ProfileDatabase,
    Verdict,
    authenticate_query,
)
from ..channel import KeyPair, handshake_pair
from ..features import FeatureRecord, SceneConfig, generate_synthetic_frames, stream_records
from ..fog import FogNode, fog_handlers, spec_to_json
from ..index import IndexStore, QuerySpec, StoreConfig, contextualize
from ..ledger.accounts import Account
from ..ledger.tx import TxKind, decode_record_payload
from ..rpc import RpcClient, RpcServer
from ..transport import FaultyTransport, MemoryNetwork, memory_pipe, parse_endpoint
from .config import ScenarioConfig
from .sim import MinerNetwork, SimChainClient


class ScenarioError(RuntimeError):
    def __init__(self, role: str, message: str):
        super().__init__(f"{role}: {message}")
        self.role = role


@dataclass
class Event:
    seq: int
    sim_ms: int
    wall_s: float
    actor: str
    kind: str
    detail: dict

    def stable(self) -> tuple:
        return (self.seq, self.sim_ms, self.actor, self.kind,
                json.dumps(self.detail, sort_keys=True))


@dataclass
class Transcript:
    events: list[Event] = field(default_factory=list)
    verdicts: list[AuthResult] = field(default_factory=list)
    tip: str = ""
    height: int = 0
    converged: bool = False
    records_streamed: int = 0
    segments_anchored: int = 0
    wall_seconds: float = 0.0

    @property
    def all_authentic(self) -> bool:
        return bool(self.verdicts) and all(v.verdict is Verdict.AUTHENTIC for v in self.verdicts)

    def stable(self) -> list[tuple]:
        """Events without wall-clock times, for run-to-run comparison."""
        return [e.stable() for e in self.events]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"seq": e.seq, "sim_ms": e.sim_ms, "wall_s": round(e.wall_s, 6),
                                   "actor": e.actor, "kind": e.kind, **e.detail},
                                  sort_keys=True) + "\n" for e in self.events)


class _Recorder:
    def __init__(self, transcript: Transcript, clock, echo=None):
        self.t = transcript
        self.clock = clock
        self.echo = echo
        self.start = time.perf_counter()

    def __call__(self, actor: str, kind: str, detail: dict | None = None) -> None:
        ev = Event(len(self.t.events), self.clock(), time.perf_counter() - self.start,
                   actor, kind, detail or {})
        self.t.events.append(ev)
        if self.echo:
            self.echo(ev)


@contextlib.contextmanager
def _as_role(role: str):
    try:
        yield
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(role, f"{type(exc).__name__}: {exc}") from exc


def _tamper(fog: FogNode, segment_id: str) -> None:
    """The fog rewrites one stored record after its digest is on chain."""
    seg = fog.store.get_segment(segment_id)
    old = seg.records[0].record
    forged = FeatureRecord(old.timestamp, old.frame_seq, old.camera_id, old.pedestrian_id,
                           old.speed + 0.5, old.direction)
    seg.records[0] = contextualize(forged, fog.context)


def run_scenario(config: ScenarioConfig, *, echo=None) -> Transcript:
    """Run the whole pipeline once; deterministic for a fixed config seed."""
    config.validate()
    wall0 = time.perf_counter()
    transcript = Transcript()
    rng = random.Random(config.seed)
    faults = {f.kind: f for f in config.faults}

    with _as_role("miner"):
        miner_specs = config.role("miner")
        chain = MinerNetwork(len(miner_specs), difficulty=config.difficulty,
                             hashrate=config.hashrate, latency_s=config.latency_ms / 1000,
                             jitter_s=config.jitter_ms / 1000, seed=rng.getrandbits(64),
                             start_ms=config.start_ms, names=[m.name for m in miner_specs])
    record = _Recorder(transcript, chain.sim.clock_ms, echo)
    for m in chain.miners:
        m._on_event = record
    deadline = lambda: chain.sim.now + config.timeout_s  # noqa: E731

    def confirm(txids: list[bytes], what: str) -> None:
        if not chain.sim.run(until=lambda: chain.mined_everywhere(txids), deadline=deadline()):
            raise ScenarioError("miner", f"{what} not mined within {config.timeout_s}s")

    with _as_role("miner"):
        chain.start()
        for m in miner_specs:
            record(m.name, "start", {"role": "miner", "address": m.address})

    cloud_spec, fog_spec = config.role("cloud")[0], config.role("fog")[0]
    edge_specs = config.role("edge")
    allow = set(config.allowlist if config.allowlist is not None
                else [n.name for n in config.nodes if n.role in ("fog", "edge")])

    with _as_role("cloud"):
        cloud_account = Account.from_seed(cloud_spec.seed_bytes())
        accounts = {n.name: Account.from_seed(n.seed_bytes()) for n in config.nodes
                    if n.role in ("fog", "edge")}
        profiles = ProfileDatabase(allowlist=[accounts[n].address for n in allow if n in accounts],
                                   clock=chain.sim.clock_ms)
        cloud = Authority(cloud_account, profiles, SimChainClient(chain.miners[0]))
        record(cloud_spec.name, "start", {"role": "cloud", "vid": cloud_account.address.hex()})

    with _as_role("fog"):
        drop_fault = faults.get("drop_put_record")
        fog_chain = SimChainClient(chain.miners[1 % len(chain.miners)])
        fog = FogNode(fog_spec.name, accounts[fog_spec.name], config.context(),
                      IndexStore(StoreConfig(window_ms=config.window_ms)), fog_chain)
        fog_keys = KeyPair.generate()
        memnet = MemoryNetwork()
        fog_server = RpcServer(fog_handlers(fog), memnet.listen(parse_endpoint(fog_spec.address)[1]
                                                               if fog_spec.address.startswith("mem://")
                                                               else fog_spec.name),
                               keypair=fog_keys, name=fog_spec.name).start()
        record(fog_spec.name, "start", {"role": "fog", "vid": fog.vid.hex()})

    with _as_role("edge"):
        if not edge_specs:
            raise ValueError("no edge nodes in roster")
        for e in edge_specs:
            record(e.name, "start", {"role": "edge", "vid": accounts[e.name].address.hex()})

    try:
        # registration
        with _as_role("cloud"):
            for spec, role in [(fog_spec, EntityRole.FOG)] + [(e, EntityRole.EDGE) for e in edge_specs]:
                entry = profiles.register_entity(accounts[spec.name].address, spec.name, role)
                record(cloud_spec.name, "register", {"entity": spec.name, "role": role.value,
                                                     "status": entry.status.value})
        # deploy
        with _as_role("cloud"):
            txid = cloud.deploy()
        confirm([txid], "contract deployment")
        record(cloud_spec.name, "deploy", {"txid": txid.hex(),
                                           "height": cloud.chain.tx_status(txid).height})
        # grant
        with _as_role("cloud"):
            decision = cloud.decide_record_permission(fog.vid)
        record(cloud_spec.name, "permission", {"entity": fog_spec.name, "granted": decision.granted,
                                               "reason": decision.reason})
        if decision.granted:
            confirm([decision.txid], "grant")
            grant = cloud.notify(decision)
            record(cloud_spec.name, "notify", {"entity": fog_spec.name,
                                               "contract": grant.contract_address.hex(),
                                               "abi": grant.abi_function, "height": grant.height})

        # stream
        sealed = []
        replay = faults.get("replay_frame")
        for i, cam in enumerate(config.cameras):
            edge = edge_specs[i % len(edge_specs)]
            with _as_role("edge"):
                scene = SceneConfig(camera_id=cam.camera_id, fps=cam.fps, start_ms=config.start_ms,
                                    max_pedestrians=cam.max_pedestrians, spawn_prob=cam.spawn_prob)
                batches = generate_synthetic_frames(scene, cam.frames, config.seed * 1000 + i)
                a, b = memory_pipe()
                session_rng = random.Random(rng.getrandbits(64))
                edge_chan, fog_chan = handshake_pair(a, b, fog_keys, name=fog_spec.name,
                                                     rng=lambda n: session_rng.randbytes(n))
                if replay and (replay.camera or config.cameras[0].camera_id) == cam.camera_id:
                    edge_chan.transport = FaultyTransport(edge_chan.transport,
                                                          duplicate={replay.frame})
                    record("harness", "fault", {"kind": "replay_frame", "camera": cam.camera_id,
                                                "frame": replay.frame})
                summary = stream_records(edge_chan, batches)
                edge_chan.close()
            record(edge.name, "stream", {"camera": cam.camera_id, "records": summary.records,
                                         "data_frames": summary.data_frames,
                                         "bytes": summary.bytes_sent})
            transcript.records_streamed += summary.records
            with _as_role("fog"):
                before = len(fog.rejected_frames)
                sealed += fog.serve_channel(fog_chan, timeout=0)
            record(fog_spec.name, "ingest", {"camera": cam.camera_id,
                                             "rejected_frames": fog.rejected_frames[before:]})

        # seal + anchor
        for seg in sealed:
            record(fog_spec.name, "seal", {"segment": seg.segment_id, "records": len(seg.records),
                                           "digest": seg.digest.hex()})
        if drop_fault:
            target = drop_fault.segment or sealed[0].segment_id

            def drop(tx):
                return tx.kind is TxKind.PUT_RECORD and decode_record_payload(tx.payload)[0] == target

            fog_chain.drop = drop
            record("harness", "fault", {"kind": "drop_put_record", "segment": target})
        with _as_role("fog"):
            receipts = fog.anchor(sealed)
        pending = [r.txid for r in receipts if r.txid and r.txid not in fog_chain.dropped]
        confirm(pending, "index tokens")
        for r in receipts:
            status = fog_chain.tx_status(r.txid) if r.txid else None
            record(fog_spec.name, "anchor", {
                "segment": r.segment_id, "error": r.error,
                "height": status.height if status else None,
                "state": status.state if status else "rejected"})
        transcript.segments_anchored = sum(1 for r in receipts if r.txid and r.txid not in
                                           fog_chain.dropped and r.error is None)

        tamper = faults.get("tamper_record")
        if tamper:
            target = tamper.segment or sealed[0].segment_id
            _tamper(fog, target)
            record("harness", "fault", {"kind": "tamper_record", "segment": target})

        # query + verify
        client = RpcClient(fog_spec.address if fog_spec.address.startswith("mem://")
                           else f"mem://{fog_spec.name}", network=memnet)
        try:
            for cam in config.cameras:
                end = config.start_ms + round(cam.frames * 1000 / cam.fps) + config.window_ms
                spec = QuerySpec(camera_id=cam.camera_id, time_range=(config.start_ms, end))
                with _as_role("fog"):
                    lines, ids = client.call("query", spec_to_json(spec))
                    segment_ids = [s for s in ids.decode().split("\n") if s]
                    out = client.call("get_segments", "\n".join(segment_ids).encode())
                    payloads = dict(zip((f.decode() for f in out[0::2]), out[1::2]))
                record(cloud_spec.name, "query", {"camera": cam.camera_id,
                                                  "records": len(lines.split(b"\n")) if lines else 0,
                                                  "segments": segment_ids})
                with _as_role("cloud"):
                    results = authenticate_query(payloads, cloud.chain)
                for res in results:
                    record(cloud_spec.name, "verdict", {
                        "segment": res.segment_id, "verdict": res.verdict.value,
                        "local": res.local_digest.hex(),
                        "chain": res.chain_digest.hex() if res.chain_digest else None,
                        "height": res.chain_height})
                transcript.verdicts.extend(results)
        finally:
            client.close()
    finally:
        fog_server.stop()

    transcript.converged = chain.settle(deadline=deadline())
    tip, height = chain.miners[0].node.get_tip()
    transcript.tip, transcript.height = tip.hex(), height
    record("harness", "final", {"tip": tip.hex(), "height": height,
                                "converged": transcript.converged,
                                "authentic": sum(v.verdict is Verdict.AUTHENTIC
                                                 for v in transcript.verdicts),
                                "tampered_or_unknown": sum(v.verdict is not Verdict.AUTHENTIC
                                                           for v in transcript.verdicts)})
    transcript.wall_seconds = time.perf_counter() - wall0
    return transcript
