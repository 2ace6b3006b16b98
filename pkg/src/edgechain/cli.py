"""Console entry points for every node role and the harness."""
from __future__ import annotations

import argparse
import logging
import queue
import signal
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .authority import (
    Authority,
    AuthError,
    EntityRole,
    ProfileDatabase,
    RegistrationError,
    authenticate_query,
)
from .channel import KeyPair, SecureChannel, SecureChannelError
from .features import (
    ConfigError,
    FeatureRecord,
    ParseError,
    SceneConfig,
    StreamError,
    generate_synthetic_frames,
    parse_feature_file,
    stream_records,
)
from .fog import FogNode, fog_handlers, spec_to_json
from .index import ContextConfig, IndexStore, QueryError, QuerySpec, StoreConfig
from .ledger.accounts import ADDRESS_LEN, Account
from .ledger.chain import DEFAULT_DIFFICULTY, Block, ChainNode
from .ledger.contract import Rejected
from .ledger.service import ChainClient, chain_handlers, wait_mined
from .rpc import RemoteError, RpcClient, RpcServer
from .transport import TcpListener, parse_endpoint

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

log = logging.getLogger("edgechain")


# ---- shared node configuration -------------------------------------------------

@dataclass
class NodeConfig:
    """Settings read from a node's TOML file; every key is optional."""

    name: str = "node"
    key_seed: str = ""
    rsa_key: str | None = None
    journal: str | None = None
    window_ms: int = 10_000
    difficulty: int = DEFAULT_DIFFICULTY
    context: dict = field(default_factory=dict)
    camera: dict = field(default_factory=dict)
    base: Path = Path(".")

    def path(self, value: str | None) -> Path | None:
        return None if value is None else self.base / value

    def account(self) -> Account:
        return Account.from_seed((self.key_seed or self.name).encode())

    def keypair(self) -> KeyPair:
        """RSA identity; generated and written to ``rsa_key`` on first use."""
        path = self.path(self.rsa_key)
        if path is not None and path.exists():
            return KeyPair.from_pem(path.read_bytes())
        keys = KeyPair.generate()
        if path is not None:
            path.write_bytes(keys.to_pem())
            path.chmod(0o600)
        return keys

    def context_config(self) -> ContextConfig:
        return ContextConfig.from_dict(self.context)


def load_node_config(path: str | None) -> NodeConfig:
    if path is None:
        return NodeConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    node = data.get("node", {})
    cfg = NodeConfig(base=Path(path).resolve().parent, context=data.get("context", {}),
                     camera=data.get("camera", {}))
    for key in ("name", "key_seed", "rsa_key", "journal"):
        if key in node:
            setattr(cfg, key, node[key])
    cfg.window_ms = int(data.get("store", {}).get("window_ms", cfg.window_ms))
    cfg.difficulty = int(data.get("chain", {}).get("difficulty", cfg.difficulty))
    return cfg


def _endpoint(addr: str) -> str:
    return addr if "://" in addr else f"tcp://{addr}"


def _listener(addr: str) -> TcpListener:
    kind, where = parse_endpoint(_endpoint(addr))
    if kind != "tcp":
        raise ConfigError(f"can only listen on tcp addresses, got {addr!r}")
    return TcpListener(*where)


def _shifted_port(addr: str, delta: int) -> str:
    _, (host, port) = parse_endpoint(_endpoint(addr))
    return f"{host}:{port + delta}"


def _wait_forever(stop: threading.Event) -> None:
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="node TOML file")
    parser.add_argument("-v", "--verbose", action="store_true")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _run(main, argv) -> int:
    try:
        return main(argv) or 0
    except (ConfigError, ParseError, OSError, SecureChannelError, Rejected, RemoteError,
            AuthError, RegistrationError, StreamError, QueryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ---- edge-node -----------------------------------------------------------------

def _frame_batches(records: list[FeatureRecord]) -> list[list[FeatureRecord]]:
    batches: dict[tuple[str, int], list[FeatureRecord]] = {}
    for r in records:
        batches.setdefault((r.camera_id, r.frame_seq), []).append(r)
    return [batches[k] for k in sorted(batches, key=lambda k: (k[1], k[0]))]


def _edge(argv) -> int:
    p = argparse.ArgumentParser(prog="edge-node",
                                description="Stream pedestrian feature records to a fog node.")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--feature-file", help="feature file to send, one record per line")
    src.add_argument("--synthetic", action="store_true", help="generate records from a scene model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--fog", required=True, help="fog ingest address host:port")
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = load_node_config(args.config)
    if args.synthetic:
        scene = SceneConfig(**{"camera_id": cfg.name, **cfg.camera})
        batches = [b for b in generate_synthetic_frames(scene, args.frames, args.seed) if b]
    else:
        batches = _frame_batches(parse_feature_file(Path(args.feature_file).read_text()))
    chan = SecureChannel.connect(_endpoint(args.fog))
    try:
        summary = stream_records(chan, batches)
    finally:
        chan.close()
    print(f"sent {summary.records} records in {summary.data_frames} frames "
          f"({summary.bytes_sent} bytes) to {chan.state.peer_name} in {summary.elapsed_s:.3f}s")
    return 0


def edge_main(argv=None) -> int:
    return _run(_edge, argv)


# ---- fog-node ------------------------------------------------------------------

def _add_query_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--camera")
    p.add_argument("--from", dest="t_from", type=int, help="start timestamp (ms, inclusive)")
    p.add_argument("--to", dest="t_to", type=int, help="end timestamp (ms, exclusive)")
    p.add_argument("--pedestrian", type=int)
    p.add_argument("--speed-min", type=float)
    p.add_argument("--speed-max", type=float)
    p.add_argument("--direction-min", type=float)
    p.add_argument("--direction-max", type=float)
    p.add_argument("--band", help="time band label")
    p.add_argument("--anomaly", dest="anomaly", action="store_const", const=True)
    p.add_argument("--normal", dest="anomaly", action="store_const", const=False)


def _range(lo, hi, default_lo, default_hi):
    if lo is None and hi is None:
        return None
    return (default_lo if lo is None else lo, default_hi if hi is None else hi)


def query_spec_from_args(args) -> QuerySpec:
    spec = QuerySpec(
        camera_id=args.camera,
        time_range=_range(args.t_from, args.t_to, 0, 2**63 - 1),
        pedestrian_id=args.pedestrian,
        speed_range=_range(args.speed_min, args.speed_max, 0.0, float("inf")),
        direction_range=_range(args.direction_min, args.direction_max, 0.0, 360.0),
        time_band=args.band,
        anomaly_flag=args.anomaly,
    )
    spec.validate()
    return spec


def remote_query(fog_addr: str, spec: QuerySpec) -> tuple[list[str], list[str]]:
    client = RpcClient(_endpoint(fog_addr))
    try:
        lines, segments = client.call("query", spec_to_json(spec))
    finally:
        client.close()
    return ([x for x in lines.decode().split("\n") if x],
            [s for s in segments.decode().split("\n") if s])


def _fog_query(argv) -> int:
    p = argparse.ArgumentParser(prog="fog-node query",
                                description="Query a running fog node's index.")
    _common(p)
    p.add_argument("--fog", required=True, help="fog query (RPC) address host:port")
    _add_query_flags(p)
    args = p.parse_args(argv)
    lines, segments = remote_query(args.fog, query_spec_from_args(args))
    for line in lines:
        print(line)
    print(f"# {len(lines)} records; segments: {' '.join(segments) or '-'}")
    return 0


@dataclass
class FogService:
    """A fog node serving edge streams and cloud queries on two TCP listeners."""

    fog: FogNode
    keypair: KeyPair
    ingest: TcpListener
    rpc: RpcServer
    stop: threading.Event = field(default_factory=threading.Event)

    def start(self) -> "FogService":
        self.rpc.start()
        threading.Thread(target=self._accept_loop, daemon=True, name="fog-ingest").start()
        return self

    def _accept_loop(self) -> None:
        while not self.stop.is_set():
            try:
                link = self.ingest.accept(timeout=0.2)
            except TimeoutError:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_edge, args=(link,), daemon=True).start()

    def _serve_edge(self, link) -> None:
        try:
            chan = SecureChannel.accept(link, self.keypair, name=self.fog.name,
                                        registry=self.rpc.registry)
            sealed = self.fog.serve_channel(chan, timeout=None)
        except (SecureChannelError, ConnectionError, ParseError, TimeoutError) as exc:
            log.warning("edge stream ended with error: %s", exc)
            return
        finally:
            link.close()
        if self.fog.chain is None:
            return
        try:
            for r in self.fog.anchor(sealed):
                status = f"tx={r.txid.hex()}" if r.txid else f"rejected={r.error}"
                log.info("anchored %s digest=%s %s", r.segment_id, r.digest.hex(), status)
        except (ConnectionError, OSError) as exc:
            log.error("anchoring failed: %s", exc)

    def close(self) -> None:
        self.stop.set()
        self.ingest.close()
        self.rpc.stop()


def start_fog(cfg: NodeConfig, listen: str, rpc_listen: str, chain_addr: str | None
              ) -> FogService:
    store_cfg = StoreConfig(window_ms=cfg.window_ms, journal_path=
                            str(cfg.path(cfg.journal)) if cfg.journal else None)
    store = IndexStore.recover(store_cfg) if store_cfg.journal_path else IndexStore(store_cfg)
    chain = ChainClient(_endpoint(chain_addr)) if chain_addr else None
    fog = FogNode(cfg.name, cfg.account(), cfg.context_config(), store, chain)
    keypair = cfg.keypair()
    rpc = RpcServer(fog_handlers(fog), _listener(rpc_listen), keypair=keypair, name=cfg.name)
    return FogService(fog, keypair, _listener(listen), rpc).start()


def _fog(argv) -> int:
    if argv and argv[0] == "query":
        return _fog_query(argv[1:])
    p = argparse.ArgumentParser(
        prog="fog-node", description="Run a fog node; `fog-node query --help` for queries.")
    _common(p)
    p.add_argument("--listen", required=True, help="edge ingest address host:port")
    p.add_argument("--rpc", help="query address (default: listen port + 1)")
    p.add_argument("--chain", help="chain node address for anchoring")
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = load_node_config(args.config)
    service = start_fog(cfg, args.listen, args.rpc or _shifted_port(args.listen, 1), args.chain)
    print(f"fog {cfg.name} vid={service.fog.vid.hex()} ingest={service.ingest.endpoint} "
          f"rpc={service.rpc.listener.endpoint}", flush=True)
    _wait_forever(service.stop)
    service.close()
    return 0


def fog_main(argv=None) -> int:
    return _run(_fog, sys.argv[1:] if argv is None else argv)


# ---- chain-node ----------------------------------------------------------------

class ChainService:
    """A chain node with RPC, optional mining thread and block/tx gossip to peers."""

    def __init__(self, node: ChainNode, listener: TcpListener, peers: list[str],
                 keypair: KeyPair, mine: bool):
        self.node = node
        self.peers = [_endpoint(p) for p in peers]
        self.endpoint = listener.endpoint
        self.stop = threading.Event()
        self._clients: dict[str, ChainClient] = {}
        self._outbox: queue.Queue = queue.Queue()
        self.rpc = RpcServer(chain_handlers(node, fetch_parent=self._fetch_parent), listener,
                             keypair=keypair, name=node.name)
        node.on_block.append(lambda b: self._outbox.put(("block", b)))
        node.on_tx.append(lambda tx: self._outbox.put(("tx", tx)))
        self.mine = mine

    def _client(self, peer: str) -> ChainClient:
        if peer not in self._clients:
            self._clients[peer] = ChainClient(peer, timeout=5.0)
        return self._clients[peer]

    def _fetch_parent(self, origin: str, block_hash: bytes) -> Block | None:
        try:
            return self._client(origin).get_block(block_hash)
        except (ConnectionError, OSError) as exc:
            log.warning("getblock from %s failed: %s", origin, exc)
            return None

    def _gossip(self) -> None:
        while not self.stop.is_set():
            try:
                kind, item = self._outbox.get(timeout=0.2)
            except queue.Empty:
                continue
            for peer in self.peers:
                try:
                    if kind == "block":
                        self._client(peer).announce_block(item, self.endpoint)
                    else:
                        self._client(peer).announce_tx(item)
                except (ConnectionError, OSError, RemoteError) as exc:
                    log.debug("gossip to %s failed: %s", peer, exc)

    def _mine(self) -> None:
        while not self.stop.is_set():
            block = self.node.mine_block(max_attempts=20_000)
            if block is None:
                if not self.node.mempool:
                    self.stop.wait(0.05)
                continue
            log.info("mined height=%d hash=%s txs=%d", block.height,
                     block.block_hash.hex()[:16], len(block.transactions))

    def start(self) -> "ChainService":
        self.rpc.start()
        threading.Thread(target=self._gossip, daemon=True, name="gossip").start()
        if self.mine:
            threading.Thread(target=self._mine, daemon=True, name="miner").start()
        return self

    def close(self) -> None:
        self.stop.set()
        self.rpc.stop()
        for c in self._clients.values():
            c.close()


def _chain(argv) -> int:
    p = argparse.ArgumentParser(prog="chain-node", description="Run a proof-of-work chain node.")
    _common(p)
    p.add_argument("--listen", default="127.0.0.1:7545", help="RPC address host:port")
    p.add_argument("--mine", action="store_true", help="mine blocks from the mempool")
    p.add_argument("--difficulty", type=int, help="leading zero bits required")
    p.add_argument("--peers", default="", help="comma-separated peer addresses")
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = load_node_config(args.config)
    difficulty = args.difficulty or cfg.difficulty
    if not 1 <= difficulty <= 32:
        raise ConfigError(f"difficulty must be in 1..32, got {difficulty}")
    node = ChainNode(cfg.name, difficulty)
    peers = [x for x in args.peers.split(",") if x]
    service = ChainService(node, _listener(args.listen), peers, cfg.keypair(), args.mine).start()
    print(f"chain {cfg.name} difficulty={difficulty} rpc={service.endpoint} "
          f"peers={','.join(peers) or '-'} mining={'on' if args.mine else 'off'}", flush=True)
    _wait_forever(service.stop)
    service.close()
    return 0


def chain_main(argv=None) -> int:
    return _run(_chain, argv)


# ---- cloud-node ----------------------------------------------------------------

def read_allowlist(path: str | None) -> list[bytes]:
    """One hex VID per line; blank lines and ``#`` comments are ignored."""
    if path is None:
        return []
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vid = bytes.fromhex(line)
        except ValueError:
            raise ConfigError(f"{path}:{n}: not a hex VID: {line!r}") from None
        if len(vid) != ADDRESS_LEN:
            raise ConfigError(f"{path}:{n}: VID must be {ADDRESS_LEN} bytes")
        out.append(vid)
    return out


def _cloud(argv) -> int:
    p = argparse.ArgumentParser(prog="cloud-node",
                                description="Entity registration, grants and verified queries.")
    _common(p)
    p.add_argument("--allowlist", help="file of VIDs verified on registration")
    p.add_argument("--chain", required=True, help="chain node address")
    sub = p.add_subparsers(dest="command", required=True)
    reg = sub.add_parser("register", help="add an entity to the profile database")
    reg.add_argument("--vid", help="hex VID (or derive it with --seed)")
    reg.add_argument("--seed", help="key seed of the entity's node config")
    reg.add_argument("--name", required=True)
    reg.add_argument("--role", choices=[r.value.lower() for r in EntityRole], required=True)
    grant = sub.add_parser("grant", help="grant record permission to a fog node")
    grant.add_argument("--vid", help="hex VID of the fog node")
    grant.add_argument("--name", help="registered name of the fog node")
    grant.add_argument("--timeout", type=float, default=60.0)
    q = sub.add_parser("query", help="query a fog node and optionally verify against the chain")
    q.add_argument("--fog", required=True, help="fog query (RPC) address")
    q.add_argument("--verify", action="store_true")
    _add_query_flags(q)
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = load_node_config(args.config)
    chain = ChainClient(_endpoint(args.chain))
    journal = cfg.path(cfg.journal or f"{cfg.name}-profiles.jsonl")
    profiles = ProfileDatabase(read_allowlist(args.allowlist), str(journal))
    cloud = Authority(cfg.account(), profiles, chain)
    try:
        if args.command == "register":
            return _cloud_register(args, profiles)
        if args.command == "grant":
            return _cloud_grant(args, cloud, profiles, chain)
        return _cloud_query(args, chain)
    finally:
        chain.close()


def _cloud_register(args, profiles: ProfileDatabase) -> int:
    if (args.vid is None) == (args.seed is None):
        raise ConfigError("give exactly one of --vid or --seed")
    vid = bytes.fromhex(args.vid) if args.vid else Account.from_seed(args.seed.encode()).address
    entry = profiles.register_entity(vid, args.name, EntityRole(args.role.capitalize()))
    print(f"{entry.vid.hex()} {entry.name} {entry.role.value} {entry.status.value}")
    return 0


def _cloud_grant(args, cloud: Authority, profiles: ProfileDatabase, chain: ChainClient) -> int:
    if args.vid:
        vid = bytes.fromhex(args.vid)
    else:
        match = [e for e in profiles.entries() if e.name == args.name]
        if not match:
            raise ConfigError(f"no registered entity named {args.name!r}")
        vid = match[0].vid
    try:
        decision = cloud.decide_record_permission(vid)
    except Rejected as exc:
        if exc.kind != "NotDeployed":
            raise
        # first grant on a fresh chain: deploy the contract, then retry
        cloud.account.last_nonce = chain.nonce_of(cloud.account.address)
        deployed = wait_mined(chain, cloud.deploy(), args.timeout)
        print(f"deployed contract at height {deployed.height}")
        decision = cloud.decide_record_permission(vid)
    if not decision.granted:
        print(f"denied {vid.hex()} {decision.reason}")
        return 2
    status = wait_mined(chain, decision.txid, timeout=args.timeout)
    grant = cloud.notify(decision)
    if grant is None:
        print(f"grant {decision.txid.hex()} {status.state} {status.reason or ''}".rstrip())
        return 1
    print(f"granted {vid.hex()} contract={grant.contract_address.hex()} "
          f"abi={grant.abi_function} height={grant.height}")
    return 0


def _cloud_query(args, chain: ChainClient) -> int:
    spec = query_spec_from_args(args)
    lines, segments = remote_query(args.fog, spec)
    if not args.verify:
        for line in lines:
            print(line)
        print(f"# {len(lines)} records; segments: {' '.join(segments) or '-'}")
        return 0
    client = RpcClient(_endpoint(args.fog))
    try:
        fields = client.call("get_segments", "\n".join(segments).encode()) if segments else []
    finally:
        client.close()
    payloads = {fields[i].decode(): fields[i + 1] for i in range(0, len(fields), 2)}
    results = authenticate_query(payloads, chain)
    for r in results:
        print(r.line())
    return 0 if all(r.verdict.value == "Authentic" for r in results) else 3


def cloud_main(argv=None) -> int:
    return _run(_cloud, argv)


# ---- harness -------------------------------------------------------------------

def _harness(argv) -> int:
    from .harness import bench
    from .harness.config import ScenarioConfig
    from .harness.scenario import ScenarioError, run_scenario

    p = argparse.ArgumentParser(prog="harness", description="Scenarios, benchmarks and plots.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a multi-node scenario from a TOML config")
    run.add_argument("config", nargs="?", help="scenario TOML (defaults if omitted)")
    run.add_argument("--transcript", help="write the transcript as JSON lines")
    run.add_argument("--quiet", action="store_true", help="only print the verdicts")
    b = sub.add_parser("bench", help="run a benchmark family")
    bsub = b.add_subparsers(dest="family", required=True)
    for name in ("auth", "channel"):
        fam = bsub.add_parser(name)
        fam.add_argument("--runs", type=int, default=bench.MIN_RUNS)
        fam.add_argument("--link", default="lan", help="link preset: lan or loopback")
        fam.add_argument("--seed", type=int, default=7)
        fam.add_argument("--out", default=f"bench_{name}.csv", help="sample CSV path")
        fam.add_argument("--plot", action="store_true", help="also render PNGs next to the CSV")
        if name == "auth":
            fam.add_argument("--records", type=int, default=256, help="records in the segment")
        else:
            fam.add_argument("--sizes", default="1k,64k,1m")
            fam.add_argument("--modes", default=",".join(bench.CHANNEL_MODES))
    plot = sub.add_parser("plot", help="render PNG plots from a sample CSV")
    plot.add_argument("csv")
    plot.add_argument("--out-dir")
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "run":
        config = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
        echo = None if args.quiet else (lambda e: print(
            f"{e.sim_ms:>15} {e.actor:>10} {e.kind:<14} {e.detail}", flush=True))
        try:
            transcript = run_scenario(config, echo=echo)
        except ScenarioError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        if args.transcript:
            Path(args.transcript).write_text(transcript.to_jsonl())
        for v in transcript.verdicts:
            print(v.line())
        print(f"# records={transcript.records_streamed} segments={transcript.segments_anchored} "
              f"height={transcript.height} converged={transcript.converged} "
              f"wall={transcript.wall_seconds:.2f}s")
        return 0 if transcript.all_authentic else 3
    if args.command == "bench":
        if args.family == "auth":
            report = bench.bench_auth_stages(args.runs, records=args.records, link=args.link,
                                             seed=args.seed)
        else:
            sizes = [bench.parse_size(s) for s in args.sizes.split(",") if s]
            modes = [m for m in args.modes.split(",") if m]
            report = bench.bench_channel(sizes, args.runs, modes=modes, link=args.link,
                                         seed=args.seed)
        out = report.write_csv(args.out)
        summary = report.write_summary(out.with_suffix(".summary.csv"))
        print(report.table())
        print(f"# samples: {out}  summary: {summary}")
        if args.plot:
            from .harness.plotting import plot_report
            for png in plot_report(out):
                print(f"# plot: {png}")
        return 0
    from .harness.plotting import plot_report
    for png in plot_report(args.csv, args.out_dir):
        print(png)
    return 0


def harness_main(argv=None) -> int:
    return _run(_harness, argv)
