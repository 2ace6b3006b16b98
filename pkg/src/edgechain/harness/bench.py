"""Benchmarks: index-authentication stage timings and channel transfer modes.

Both families write raw per-run samples; summaries (mean, p95, stdev,
throughput) are computed from those samples, never from a single run.
"""
from __future__ import annotations

import csv
import hashlib
import os
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ..authority import digest_segment, fetch_token, verify_digest
from ..channel import (
    SESSION_ID_LEN,
    KeyPair,
    PlainChannel,
    Role,
    SecureChannel,
    SessionRegistry,
    oaep_decrypt_chunks,
    oaep_encrypt_chunks,
    preshared_channel,
)
from ..features import ConfigError, SceneConfig, generate_synthetic_frames
from ..index import ContextConfig, canonical_bytes, contextualize, make_segment_id
from ..ledger.accounts import Account
from ..ledger.chain import ChainNode
from ..ledger.service import ChainClient, chain_handlers
from ..ledger.tx import deploy_tx, grant_tx, put_record_tx
from ..rpc import RpcServer
from ..transport import TcpListener, connect
from ..wire import Frame, FrameType, decode_fields, decode_uint, encode_fields, encode_uint
from .config import link_model

MIN_RUNS = 50
AUTH_STAGES = ("query_index_token", "process_data", "verify_hash")
CHANNEL_MODES = ("plain", "symmetric_only", "asymmetric_only", "hybrid")
CSV_FIELDS = ("family", "label", "payload_bytes", "run", "seconds", "link")
SUMMARY_FIELDS = ("family", "label", "payload_bytes", "link", "runs", "mean_s", "p95_s",
                  "stdev_s", "min_s", "max_s", "throughput_Bps")


@dataclass(frozen=True)
class Sample:
    family: str
    label: str
    payload_bytes: int
    run: int
    seconds: float
    link: str


@dataclass(frozen=True)
class Summary:
    family: str
    label: str
    payload_bytes: int
    link: str
    runs: int
    mean_s: float
    p95_s: float
    stdev_s: float
    min_s: float
    max_s: float

    @property
    def throughput_Bps(self) -> float:
        return self.payload_bytes / self.mean_s if self.mean_s > 0 else 0.0

    def row(self) -> dict:
        return {**{k: getattr(self, k) for k in SUMMARY_FIELDS}}


def summarize(samples: Sequence[Sample]) -> Summary:
    s = samples[0]
    xs = [x.seconds for x in samples]
    p95 = statistics.quantiles(xs, n=20, method="inclusive")[18] if len(xs) > 1 else xs[0]
    return Summary(s.family, s.label, s.payload_bytes, s.link, len(xs), statistics.fmean(xs),
                   p95, statistics.stdev(xs) if len(xs) > 1 else 0.0, min(xs), max(xs))


@dataclass
class BenchReport:
    samples: list[Sample] = field(default_factory=list)

    def add(self, *args) -> None:
        self.samples.append(Sample(*args))

    def extend(self, other: "BenchReport") -> "BenchReport":
        self.samples.extend(other.samples)
        return self

    def groups(self) -> dict[tuple[str, str, int, str], list[Sample]]:
        out: dict[tuple[str, str, int, str], list[Sample]] = {}
        for s in self.samples:
            out.setdefault((s.family, s.label, s.payload_bytes, s.link), []).append(s)
        return out

    def summaries(self) -> list[Summary]:
        return [summarize(v) for v in self.groups().values()]

    def summary(self, label: str, payload_bytes: int | None = None,
                link: str | None = None) -> Summary:
        for (_, lab, size, lk), v in self.groups().items():
            if lab == label and payload_bytes in (None, size) and link in (None, lk):
                return summarize(v)
        raise KeyError((label, payload_bytes, link))

    def mean(self, label: str, payload_bytes: int | None = None, link: str | None = None) -> float:
        return self.summary(label, payload_bytes, link).mean_s

    @property
    def runs(self) -> int:
        return min((len(v) for v in self.groups().values()), default=0)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, CSV_FIELDS)
            w.writeheader()
            for s in self.samples:
                w.writerow({k: getattr(s, k) if k != "seconds" else repr(s.seconds)
                            for k in CSV_FIELDS})
        return path

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, SUMMARY_FIELDS)
            w.writeheader()
            for s in self.summaries():
                w.writerow({**s.row(), "throughput_Bps": s.throughput_Bps})
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "BenchReport":
        report = cls()
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_FIELDS:
                raise ConfigError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
            for row in reader:
                report.add(row["family"], row["label"], int(row["payload_bytes"]),
                           int(row["run"]), float(row["seconds"]), row["link"])
        return report

    def table(self) -> str:
        lines = [f"{'family':8} {'label':18} {'bytes':>9} {'link':8} {'runs':>4} "
                 f"{'mean_ms':>10} {'p95_ms':>10} {'stdev_ms':>9}"]
        for s in self.summaries():
            lines.append(f"{s.family:8} {s.label:18} {s.payload_bytes:9d} {s.link:8} {s.runs:4d} "
                         f"{s.mean_s * 1e3:10.3f} {s.p95_s * 1e3:10.3f} {s.stdev_s * 1e3:9.3f}")
        return "\n".join(lines)


def _check_runs(runs: int) -> None:
    if runs < MIN_RUNS:
        raise ConfigError(f"runs must be >= {MIN_RUNS}, got {runs}")


# ---- index authentication stages ------------------------------------------

@dataclass
class AuthFixture:
    """A mined chain holding one anchored segment, served over secure RPC."""

    node: ChainNode
    segment_id: str
    payload: bytes
    server: RpcServer
    endpoint: str

    def close(self) -> None:
        self.server.stop()


def segment_records(count: int, seed: int, camera_id: str = "cam01"):
    scene = SceneConfig(camera_id=camera_id, max_pedestrians=6, spawn_prob=0.8)
    records = []
    frames = 64
    while len(records) < count:
        records = [r for batch in generate_synthetic_frames(scene, frames, seed) for r in batch]
        frames *= 2
    ctx = ContextConfig(zones={camera_id: "lobby"})
    return [contextualize(r, ctx) for r in records[:count]]


def prepare_auth_fixture(records: int = 256, *, seed: int = 7, difficulty: int = 12,
                         link: str = "lan") -> AuthFixture:
    """Anchor one segment of ``records`` records and serve the chain over TCP."""
    recs = segment_records(records, seed)
    payload = canonical_bytes(recs)
    segment_id = make_segment_id(recs[0].record.camera_id, recs[0].record.timestamp)
    node = ChainNode("bench-chain", difficulty, seed=seed)
    owner = Account.from_seed(hashlib.sha256(b"bench-owner").digest())
    fog = Account.from_seed(hashlib.sha256(b"bench-fog").digest())
    for tx in (deploy_tx(owner), grant_tx(owner, fog.address),
               put_record_tx(fog, segment_id, hashlib.sha256(payload).digest())):
        node.submit_tx(tx, gossip=False)
        while node.mempool:
            node.mine_block()
    if node.get_index_token(segment_id) is None:
        raise RuntimeError("bench segment was not anchored")
    server = RpcServer(chain_handlers(node), TcpListener(link=link_model(link, seed)),
                       keypair=KeyPair.generate(), name="bench-chain").start()
    return AuthFixture(node, segment_id, payload, server, server.listener.endpoint)


def bench_auth_stages(runs: int = MIN_RUNS, *, records: int = 256, link: str = "lan",
                      seed: int = 7, fixture: AuthFixture | None = None) -> BenchReport:
    """Time the three index-authentication stages separately, ``runs`` times.

    query_index_token opens a fresh secure session to the chain node for
    every lookup, as a cloud node would for each query it verifies.
    """
    _check_runs(runs)
    own = fixture is None
    fx = fixture or prepare_auth_fixture(records, seed=seed, link=link)
    client = ChainClient(fx.endpoint, session_per_request=True, link=link_model(link, seed + 1))
    report = BenchReport()
    size = len(fx.payload)
    try:
        fetch_token(client, fx.segment_id)  # warm-up, not recorded
        for run in range(runs):
            t0 = time.perf_counter()
            token = fetch_token(client, fx.segment_id)
            t1 = time.perf_counter()
            local, canonical = digest_segment(fx.payload)
            t2 = time.perf_counter()
            ok = verify_digest(local, token)
            t3 = time.perf_counter()
            if not (canonical and ok):
                raise RuntimeError("bench segment failed verification")
            for label, dt in zip(AUTH_STAGES, (t1 - t0, t2 - t1, t3 - t2)):
                report.add("auth", label, size, run, dt, link)
    finally:
        client.close()
        if own:
            fx.close()
    return report


# ---- channel transfer modes -------------------------------------------------

def parse_size(text: str) -> int:
    """``1k`` -> 1024, ``64k``, ``1m`` -> 1 MiB; bare integers are bytes."""
    text = text.strip().lower()
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    try:
        if text and text[-1] in units:
            return int(text[:-1]) * units[text[-1]]
        return int(text)
    except ValueError:
        raise ConfigError(f"bad payload size {text!r}") from None


class _ModeServer:
    """Receives one payload per connection and acknowledges its length."""

    def __init__(self, mode: str, keypair: KeyPair, psk: bytes, link: str, seed: int):
        self.mode, self.keypair, self.psk = mode, keypair, psk
        self.registry = SessionRegistry()
        self.listener = TcpListener(link=link_model(link, seed))
        self.errors: list[BaseException] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"bench-{mode}")
        self._thread.start()

    @property
    def endpoint(self) -> str:
        return self.listener.endpoint

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                link = self.listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except OSError:
                return
            try:
                self._serve(link)
            except Exception as exc:  # reported by the client side
                self.errors.append(exc)
            finally:
                link.close()

    def _serve(self, link) -> None:
        if self.mode == "asymmetric_only":
            data = oaep_decrypt_chunks(self.keypair, link.recv_frame(30).body)
            link.send_frame(Frame(FrameType.DATA, encode_uint(len(data))))
            return
        if self.mode == "plain":
            chan = PlainChannel(link)
        elif self.mode == "symmetric_only":
            (sid,) = decode_fields(link.recv_frame(30).body, 1)
            chan = preshared_channel(link, self.psk, sid, Role.RESPONDER)
        else:
            chan = SecureChannel.accept(link, self.keypair, name="bench", timeout=30,
                                        registry=self.registry)
        data = chan.recv(30)
        chan.send(encode_uint(len(data)))
        chan.recv(30)  # CLOSE

    def close(self) -> None:
        self._stop.set()
        self.listener.close()
        self._thread.join(timeout=2)


def _transfer(mode: str, endpoint: str, payload: bytes, keypair: KeyPair, psk: bytes,
              link) -> float:
    """Seconds from connect until the receiver acknowledges the whole payload."""
    t0 = time.perf_counter()
    t = connect(endpoint, link=link)
    try:
        if mode == "asymmetric_only":
            t.send_frame(Frame(FrameType.DATA, oaep_encrypt_chunks(keypair.public_key, payload)))
            ack = t.recv_frame(60).body
        else:
            if mode == "plain":
                chan = PlainChannel(t)
            elif mode == "symmetric_only":
                sid = os.urandom(SESSION_ID_LEN)
                t.send_frame(Frame(FrameType.HELLO, encode_fields(sid)))
                chan = preshared_channel(t, psk, sid, Role.INITIATOR)
            else:
                chan = SecureChannel.connect(t, timeout=30, registry=SessionRegistry())
            chan.send(payload)
            ack = chan.recv(60)
        elapsed = time.perf_counter() - t0
        if mode != "asymmetric_only":
            chan.close()
    finally:
        t.close()
    if ack is None or decode_uint(ack) != len(payload):
        raise RuntimeError(f"{mode}: receiver acknowledged {ack!r} for {len(payload)} bytes")
    return elapsed


def bench_channel(sizes: Iterable[int], runs: int = MIN_RUNS, *,
                  modes: Sequence[str] = CHANNEL_MODES, link: str = "lan", seed: int = 7,
                  keypair: KeyPair | None = None) -> BenchReport:
    """Transfer time per mode and payload size, measured end to end over TCP.

    Each run opens a new connection. Hybrid runs include the full handshake;
    symmetric-only uses a preshared key; asymmetric-only encrypts every
    OAEP-sized chunk under the receiver's public key, known in advance.
    """
    _check_runs(runs)
    for m in modes:
        if m not in CHANNEL_MODES:
            raise ConfigError(f"unknown channel mode {m!r}; choose from {', '.join(CHANNEL_MODES)}")
    sizes = list(sizes)
    if any(s < 0 for s in sizes):
        raise ConfigError("payload sizes must be non-negative")
    keypair = keypair or KeyPair.generate()
    psk = hashlib.sha256(b"bench-preshared-%d" % seed).digest()
    report = BenchReport()
    servers = {m: _ModeServer(m, keypair, psk, link, seed) for m in modes}
    client_link = link_model(link, seed + 1)
    try:
        for size in sizes:
            payload = os.urandom(size)
            # The fast modes take turns within each run so drift in machine load hits
            # them alike. A multi-second asymmetric run would disturb whichever
            # transfer came next, so that mode gets its own block.
            fast = [m for m in modes if m != "asymmetric_only"]
            blocks = [fast] + [["asymmetric_only"]] * ("asymmetric_only" in modes)
            for block in blocks:
                for mode in block:  # warm-up
                    _transfer(mode, servers[mode].endpoint, payload, keypair, psk, client_link)
                for run in range(runs):
                    for mode in block:
                        dt = _transfer(mode, servers[mode].endpoint, payload, keypair, psk,
                                       client_link)
                        report.add("channel", mode, size, run, dt, link)
    finally:
        for server in servers.values():
            server.close()
    for mode, server in servers.items():
        if server.errors:
            raise RuntimeError(f"{mode} receiver failed: {server.errors[0]!r}")
    return report
