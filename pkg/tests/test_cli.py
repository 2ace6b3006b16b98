"""The node entry points, run in-process against live TCP services."""
import time
from argparse import Namespace

import pytest

from edgechain import cli
from edgechain.features import ConfigError
from edgechain.index import QueryError
from edgechain.ledger.accounts import Account
from edgechain.ledger.chain import ChainNode


def test_node_config_defaults_and_toml(tmp_path):
    assert cli.load_node_config(None).name == "node"
    path = tmp_path / "fog.toml"
    path.write_text("""
[node]
name = "fog01"
key_seed = "s3cret"
rsa_key = "fog.pem"

[store]
window_ms = 5000

[chain]
difficulty = 12

[context]
zones = { cam01 = "lobby" }
""")
    cfg = cli.load_node_config(str(path))
    assert (cfg.name, cfg.window_ms, cfg.difficulty) == ("fog01", 5000, 12)
    assert cfg.account().address == Account.from_seed(b"s3cret").address
    assert cfg.context_config().zones == {"cam01": "lobby"}
    first = cfg.keypair()
    assert (tmp_path / "fog.pem").exists()
    assert cfg.keypair().public_bytes == first.public_bytes


def test_bad_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[node\n")
    assert cli.chain_main(["--config", str(path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_allowlist(tmp_path):
    vid = Account.from_seed(b"x").address
    path = tmp_path / "allow.txt"
    path.write_text(f"# fog nodes\n{vid.hex()}  # fog01\n\n")
    assert cli.read_allowlist(str(path)) == [vid]
    path.write_text("abcd\n")
    with pytest.raises(ConfigError):
        cli.read_allowlist(str(path))


def _query_args(**kw):
    base = dict(camera=None, t_from=None, t_to=None, pedestrian=None, speed_min=None,
                speed_max=None, direction_min=None, direction_max=None, band=None, anomaly=None)
    return Namespace(**{**base, **kw})


def test_query_flags_to_spec():
    spec = cli.query_spec_from_args(_query_args(camera="cam01", speed_min=0.2, anomaly=True))
    assert spec.camera_id == "cam01" and spec.anomaly_flag is True
    assert spec.speed_range == (0.2, float("inf")) and spec.time_range is None
    with pytest.raises(QueryError):
        cli.query_spec_from_args(_query_args(t_from=10, t_to=5))


def test_empty_range_exits_1(capsys):
    assert cli.fog_main(["query", "--fog", "127.0.0.1:9", "--from", "10", "--to", "5"]) == 1
    assert "EmptyRange" in capsys.readouterr().err


@pytest.fixture
def deployment(tmp_path, fog_keys, other_keys):
    a = cli.ChainService(ChainNode("chain-a", 10), cli._listener("127.0.0.1:0"), [],
                         fog_keys, mine=True).start()
    b = cli.ChainService(ChainNode("chain-b", 10), cli._listener("127.0.0.1:0"), [],
                         other_keys, mine=False).start()
    a.peers, b.peers = [b.endpoint], [a.endpoint]
    fog_cfg = cli.NodeConfig(name="fog01", key_seed="fog-seed", window_ms=2_000,
                             context={"zones": {"cam07": "gate"}})
    fog_cfg.keypair = lambda: fog_keys
    fog = cli.start_fog(fog_cfg, "127.0.0.1:0", "127.0.0.1:0",
                        b.endpoint.removeprefix("tcp://"))
    yield a, b, fog
    fog.close()
    a.close()
    b.close()


def _addr(endpoint):
    return endpoint.removeprefix("tcp://")


def test_full_deployment(deployment, tmp_path, capsys):
    chain_a, chain_b, fog = deployment
    fog_vid = Account.from_seed(b"fog-seed").address
    (tmp_path / "allow.txt").write_text(fog_vid.hex() + "\n")
    (tmp_path / "cloud.toml").write_text('[node]\nname = "cloud"\njournal = "profiles.jsonl"\n')
    (tmp_path / "edge.toml").write_text('[node]\nname = "cam07"\n')
    cloud = ["--config", str(tmp_path / "cloud.toml"), "--allowlist", str(tmp_path / "allow.txt"),
             "--chain", _addr(chain_a.endpoint)]

    assert cli.cloud_main([*cloud, "register", "--seed", "fog-seed", "--name", "fog01",
                           "--role", "fog"]) == 0
    assert "Verified" in capsys.readouterr().out
    assert cli.cloud_main([*cloud, "grant", "--name", "fog01", "--timeout", "30"]) == 0
    out = capsys.readouterr().out
    assert "deployed contract" in out and f"granted {fog_vid.hex()}" in out

    assert cli.edge_main(["--config", str(tmp_path / "edge.toml"), "--synthetic", "--seed", "3",
                          "--frames", "90", "--fog", _addr(fog.ingest.endpoint)]) == 0
    assert "to fog01" in capsys.readouterr().out

    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        receipts = list(fog.fog.anchored.values())
        if receipts and all(chain_a.node.get_index_token(r.segment_id) for r in receipts):
            break
        time.sleep(0.1)
    assert receipts and all(r.txid for r in receipts)

    rpc = _addr(fog.rpc.listener.endpoint)
    assert cli.fog_main(["query", "--fog", rpc, "--camera", "cam07"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith(f"# {len(out) - 1} records")
    assert all(line.split(",")[2] == "cam07" for line in out[:-1])

    assert cli.cloud_main([*cloud, "query", "--fog", rpc, "--camera", "cam07", "--verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(receipts) and all("Authentic" in x for x in lines)


def test_harness_run_quiet(tmp_path, capsys):
    transcript = tmp_path / "t.jsonl"
    (tmp_path / "s.toml").write_text("[scenario]\ndifficulty = 12\n")
    assert cli.harness_main(["run", str(tmp_path / "s.toml"), "--quiet",
                             "--transcript", str(transcript)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("# records=") and "converged=True" in out[-1]
    assert all("Authentic" in line for line in out[:-1])
    assert transcript.read_text().count("\n") > 10


def test_harness_bench_needs_fifty_runs(capsys):
    assert cli.harness_main(["bench", "auth", "--runs", "10"]) == 1
    assert "50" in capsys.readouterr().err


def test_harness_bench_channel_and_plot(tmp_path, capsys):
    out = tmp_path / "ch.csv"
    assert cli.harness_main(["bench", "channel", "--runs", "50", "--sizes", "1k",
                             "--modes", "plain,symmetric_only", "--link", "loopback",
                             "--out", str(out), "--plot"]) == 0
    text = capsys.readouterr().out
    assert "symmetric_only" in text
    assert (tmp_path / "ch.summary.csv").exists() and (tmp_path / "ch_channel.png").exists()
