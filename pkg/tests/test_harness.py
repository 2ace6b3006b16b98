import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from edgechain.authority import Verdict
from edgechain.features import ConfigError
from edgechain.harness import bench
from edgechain.harness.bench import BenchReport, bench_auth_stages, bench_channel, parse_size
from edgechain.harness.config import (
    FaultSpec,
    NodeSpec,
    ScenarioConfig,
    default_roster,
    link_model,
)
from edgechain.harness.plotting import plot_report
from edgechain.harness.scenario import ScenarioError, run_scenario
from edgechain.harness.sim import SimNetwork, Simulator

# ---- config ---------------------------------------------------------------


def test_default_config_is_valid():
    cfg = ScenarioConfig()
    cfg.validate()
    assert len(cfg.role("miner")) == 4
    assert cfg.difficulty == 16


def test_duplicate_addresses_rejected():
    nodes = default_roster(2, ["cam01"])
    nodes[1] = NodeSpec(nodes[1].role, nodes[1].name, nodes[0].address)
    with pytest.raises(ConfigError):
        ScenarioConfig(nodes=nodes).validate()


def test_needs_a_miner():
    nodes = [n for n in default_roster(1, ["cam01"]) if n.role != "miner"]
    with pytest.raises(ConfigError):
        ScenarioConfig(nodes=nodes).validate()


def test_unknown_fault_rejected():
    with pytest.raises(ConfigError):
        ScenarioConfig(faults=[FaultSpec("meteor")]).validate()


def test_load_toml(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text("""
[scenario]
seed = 11
difficulty = 10
miners = 2

[network]
latency_ms = 3.0

[[cameras]]
camera_id = "gate"
zone = "entrance"
frames = 120

[[faults]]
kind = "tamper_record"
""")
    cfg = ScenarioConfig.load(path)
    assert (cfg.seed, cfg.difficulty, cfg.latency_ms) == (11, 10, 3.0)
    assert len(cfg.role("miner")) == 2
    assert cfg.cameras[0].camera_id == "gate" and cfg.context().zones == {"gate": "entrance"}
    assert cfg.faults[0].kind == "tamper_record"


def test_bad_toml(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text("[scenario\n")
    with pytest.raises(ConfigError):
        ScenarioConfig.load(path)


def test_link_presets():
    assert link_model("loopback") is None
    lan = link_model("lan", seed=1)
    assert lan.delay(0) >= 0.0005
    assert math.isclose(lan.delay(12_500_000) - lan.delay(0), 1.0, abs_tol=2e-4)
    with pytest.raises(ConfigError):
        link_model("carrier-pigeon")


# ---- simulator ------------------------------------------------------------


class _Peer:
    def __init__(self, name):
        self.name = name


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40))
def test_links_are_fifo(seed, count):
    sim = Simulator()
    net = SimNetwork(sim, latency_s=0.01, jitter_s=0.05, rng=random.Random(seed))
    a, b = _Peer("a"), _Peer("b")
    got = []
    for i in range(count):
        net.send(a, b, "tx", i, lambda payload, src: got.append(payload))
        sim.schedule(0.001, lambda: None)
        sim.run(until=lambda: False, deadline=sim.now + 0.001)
    sim.run(until=lambda: len(got) == count, deadline=sim.now + 10)
    assert got == list(range(count))


# ---- scenario -------------------------------------------------------------

SMALL = dict(difficulty=12)


def test_scenario_tamper_record():
    cfg = ScenarioConfig(faults=[FaultSpec("tamper_record")], **SMALL)
    t = run_scenario(cfg)
    bad = [v for v in t.verdicts if v.verdict is Verdict.TAMPERED_OR_UNKNOWN]
    assert len(bad) == 1 and bad[0].chain_digest is not None
    assert bad[0].local_digest != bad[0].chain_digest


def test_scenario_drop_put_record():
    cfg = ScenarioConfig(faults=[FaultSpec("drop_put_record")], **SMALL)
    t = run_scenario(cfg)
    bad = [v for v in t.verdicts if v.verdict is Verdict.TAMPERED_OR_UNKNOWN]
    assert len(bad) == 1 and bad[0].chain_digest is None and bad[0].chain_height is None
    assert any(e.kind == "fault" and e.detail["kind"] == "drop_put_record" for e in t.events)


def test_scenario_replayed_frame_is_dropped():
    cfg = ScenarioConfig(faults=[FaultSpec("replay_frame", camera="cam02", frame=5)], **SMALL)
    t = run_scenario(cfg)
    assert t.all_authentic
    clean = run_scenario(ScenarioConfig(**SMALL))
    assert t.records_streamed == clean.records_streamed
    assert [v.local_digest for v in t.verdicts] == [v.local_digest for v in clean.verdicts]


def test_transcript_deterministic():
    a, b = run_scenario(ScenarioConfig(**SMALL)), run_scenario(ScenarioConfig(**SMALL))
    assert a.stable() == b.stable()
    assert a.tip == b.tip
    c = run_scenario(ScenarioConfig(seed=8, **SMALL))
    assert c.stable() != a.stable()


def test_transcript_jsonl_has_every_step():
    t = run_scenario(ScenarioConfig(**SMALL))
    kinds = {e.kind for e in t.events}
    assert {"register", "deploy", "permission", "notify", "stream", "seal", "anchor", "query",
            "verdict", "final"} <= kinds
    lines = t.to_jsonl().splitlines()
    assert len(lines) == len(t.events)


def test_missing_role_names_it():
    nodes = [n for n in default_roster(2, ["cam01"]) if n.role != "edge"]
    with pytest.raises(ScenarioError) as exc:
        run_scenario(ScenarioConfig(nodes=nodes, **SMALL))
    assert exc.value.role == "edge"


# ---- benchmarks -----------------------------------------------------------


def test_parse_size():
    assert [parse_size(s) for s in ("1k", "64k", "1m", "0", "17")] == [1024, 65536, 1 << 20, 0, 17]
    with pytest.raises(ConfigError):
        parse_size("lots")


def test_runs_below_fifty_rejected():
    with pytest.raises(ConfigError):
        bench_auth_stages(49)
    with pytest.raises(ConfigError):
        bench_channel([0], 10)


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        bench_channel([0], 50, modes=["plain", "quantum"])


def test_zero_byte_payload_all_modes(fog_keys):
    report = bench_channel([0], 50, link="loopback", keypair=fog_keys)
    for mode in bench.CHANNEL_MODES:
        s = report.summary(mode, 0)
        assert s.runs == 50 and s.mean_s > 0
    # the handshake is the only real work at zero bytes
    assert report.mean("hybrid", 0) > report.mean("plain", 0)


@pytest.fixture(scope="module")
def auth_fixtures():
    small = bench.prepare_auth_fixture(200, link="loopback")
    large = bench.prepare_auth_fixture(400, link="loopback")
    yield small, large
    small.close()
    large.close()


def test_auth_stage_timings_positive(auth_fixtures):
    report = bench_auth_stages(50, link="loopback", fixture=auth_fixtures[0])
    assert report.runs == 50
    for stage in bench.AUTH_STAGES:
        assert all(s.seconds > 0 for s in report.samples if s.label == stage)


def test_doubling_segment_scales_process_data_only(auth_fixtures):
    small, large = auth_fixtures
    assert len(large.payload) > 1.8 * len(small.payload)
    a = bench_auth_stages(50, link="loopback", fixture=small)
    b = bench_auth_stages(50, link="loopback", fixture=large)
    assert b.mean("process_data") > 1.3 * a.mean("process_data")
    assert abs(b.mean("verify_hash") - a.mean("verify_hash")) < 5e-6


def _p95_oracle(xs):
    xs = sorted(xs)
    pos = 0.95 * (len(xs) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


@given(st.lists(st.floats(1e-6, 10.0), min_size=2, max_size=200))
def test_summary_statistics(xs):
    r = BenchReport()
    for i, x in enumerate(xs):
        r.add("auth", "verify_hash", 10, i, x, "lan")
    s = r.summary("verify_hash")
    assert math.isclose(s.mean_s, sum(xs) / len(xs), rel_tol=1e-9)
    assert math.isclose(s.p95_s, _p95_oracle(xs), rel_tol=1e-9, abs_tol=1e-12)
    assert s.min_s == min(xs) and s.max_s == max(xs)


def test_csv_round_trip_and_plot(tmp_path):
    r = BenchReport()
    rnd = random.Random(3)
    for run in range(50):
        for stage in bench.AUTH_STAGES:
            r.add("auth", stage, 2000, run, rnd.uniform(1e-6, 1e-2), "lan")
        for mode in bench.CHANNEL_MODES:
            for size in (1024, 1 << 20):
                r.add("channel", mode, size, run, rnd.uniform(1e-3, 1.0), "lan")
    path = r.write_csv(tmp_path / "report.csv")
    back = BenchReport.read_csv(path)
    assert back.samples == r.samples
    r.write_summary(tmp_path / "report.summary.csv")
    pngs = plot_report(path, tmp_path / "plots")
    assert [p.name for p in pngs] == ["report_auth.png", "report_channel.png"]
    for p in pngs:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_read_csv_rejects_foreign_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ConfigError):
        BenchReport.read_csv(p)
