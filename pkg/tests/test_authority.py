import random

import pytest

from edgechain.authority import (
    Authority,
    AuthError,
    EntityRole,
    EntityStatus,
    ProfileDatabase,
    RegistrationError,
    Verdict,
    all_authentic,
    authenticate_query,
    filter_verified,
)
from edgechain.features import FeatureRecord
from edgechain.fog import FogNode
from edgechain.index import (
    ContextConfig,
    IndexStore,
    QuerySpec,
    canonical_bytes,
    contextualize,
)
from edgechain.ledger import Account, ChainNode
from edgechain.ledger.contract import ABI_FUNCTIONS, CONTRACT_ADDRESS

D = 8
CTX = ContextConfig(zones={"cam01": "lobby", "cam02": "dock"})


class DeadChain:
    def get_index_token(self, segment_id):
        raise ConnectionRefusedError("no chain")


def mining_chain():
    return ChainNode("chain", D, seed=3, clock=lambda: 1_700_000_000_000)


@pytest.fixture
def cloud():
    owner, fog, edge = (Account.from_seed(s) for s in (b"cloud", b"fog", b"edge"))
    chain = mining_chain()
    profiles = ProfileDatabase(allowlist=[fog.address, edge.address], clock=lambda: 7)
    auth = Authority(owner, profiles, chain)
    auth.deploy()
    chain.mine_block()
    return auth, chain, fog, edge


# ---- registration ------------------------------------------------------------------

def test_allowlist_controls_initial_status():
    a, b = Account.from_seed(b"a").address, Account.from_seed(b"b").address
    db = ProfileDatabase(allowlist=[a])
    assert db.register_entity(a, "fog-a", EntityRole.FOG).status is EntityStatus.VERIFIED
    assert db.register_entity(b, "fog-b", EntityRole.FOG).status is EntityStatus.PENDING
    with pytest.raises(RegistrationError) as exc:
        db.register_entity(a, "again", EntityRole.FOG)
    assert exc.value.kind == "Duplicate"
    with pytest.raises(RegistrationError) as exc:
        db.register_entity(b"short", "x", EntityRole.FOG)
    assert exc.value.kind == "Malformed"


def test_profile_journal_survives_restart(tmp_path):
    path = str(tmp_path / "profiles.jsonl")
    a = Account.from_seed(b"a").address
    db = ProfileDatabase(allowlist=[], journal_path=path)
    db.register_entity(a, "fog-a", EntityRole.FOG)
    db.verify(a)
    db.revoke(a)
    again = ProfileDatabase(journal_path=path)
    entry = again.get(a)
    assert (entry.name, entry.role, entry.status) == ("fog-a", EntityRole.FOG, EntityStatus.REVOKED)


# ---- policy decisions ------------------------------------------------------------------

def test_verified_fog_is_granted_and_notified(cloud):
    auth, chain, fog, _ = cloud
    auth.profiles.register_entity(fog.address, "fog", EntityRole.FOG)
    decision = auth.decide_record_permission(fog.address)
    assert decision.granted
    assert auth.notify(decision) is None  # not mined yet
    chain.mine_block()
    grant = auth.notify(decision)
    assert grant.contract_address == CONTRACT_ADDRESS and grant.abi_function in ABI_FUNCTIONS
    assert chain.is_authorized(fog.address)


@pytest.mark.parametrize("setup,reason", [
    ("unknown", "Unknown"),
    ("edge", "WrongRole"),
    ("pending", "NotVerified"),
    ("revoked", "Revoked"),
])
def test_denials(cloud, setup, reason):
    auth, chain, fog, edge = cloud
    vid = fog.address
    if setup == "edge":
        vid = edge.address
        auth.profiles.register_entity(vid, "edge", EntityRole.EDGE)
    elif setup == "pending":
        vid = Account.from_seed(b"stranger").address
        auth.profiles.register_entity(vid, "fog-x", EntityRole.FOG)
    elif setup == "revoked":
        auth.profiles.register_entity(vid, "fog", EntityRole.FOG)
        auth.profiles.revoke(vid)
    decision = auth.decide_record_permission(vid)
    assert not decision.granted and decision.reason == reason
    assert decision.txid is None and not chain.mempool


def test_revocation_denies_writes_keeps_reads(cloud):
    auth, chain, fog, _ = cloud
    auth.profiles.register_entity(fog.address, "fog", EntityRole.FOG)
    auth.decide_record_permission(fog.address)
    chain.mine_block()
    node = FogNode("fog", fog, CTX, IndexStore(), chain)
    sealed = node.ingest([FeatureRecord(t * 1000, t, "cam01", 1, 0.01, 0.0) for t in range(25)])
    node.anchor(sealed)
    chain.mine_block()
    auth.revoke(fog.address)
    chain.mine_block()
    assert not auth.decide_record_permission(fog.address).granted
    assert not chain.is_authorized(fog.address)
    payloads = node.segment_payloads([s.segment_id for s in sealed])
    assert all_authentic(authenticate_query(payloads, chain))


# ---- verification ------------------------------------------------------------------

def anchored_fog(records, seed=0):
    owner, fog = Account.from_seed(b"o%d" % seed), Account.from_seed(b"f%d" % seed)
    chain = mining_chain()
    auth = Authority(owner, ProfileDatabase(allowlist=[fog.address]), chain)
    auth.deploy()
    auth.profiles.register_entity(fog.address, "fog", EntityRole.FOG)
    auth.decide_record_permission(fog.address)
    chain.mine_block()
    node = FogNode("fog", fog, CTX, IndexStore(), chain)
    sealed = node.ingest(records) + node.store.seal_all()
    receipts = node.anchor(sealed)
    assert len(receipts) == len(node.store.segments())
    assert all(r.error is None for r in receipts)
    chain.mine_block()
    return node, chain


def walkers(n, cams=("cam01",), seed=0):
    rnd = random.Random(seed)
    return [FeatureRecord(1_700_000_000_000 + i * 100, i, rnd.choice(cams), rnd.randrange(5),
                          rnd.random(), rnd.random() * 359) for i in range(n)]


def test_untampered_is_authentic():
    node, chain = anchored_fog(walkers(300))
    res = node.query(QuerySpec(camera_id="cam01"))
    results = authenticate_query(node.segment_payloads(res.segment_ids), chain)
    assert len(results) == len(res.segment_ids) >= 3
    assert all(r.verdict is Verdict.AUTHENTIC and r.local_digest == r.chain_digest
               for r in results)
    assert all_authentic(results)


def test_altered_speed_is_detected():
    node, chain = anchored_fog(walkers(50))
    sid = node.store.segments()[0].segment_id
    seg = node.store.get_segment(sid)
    r0 = seg.records[0]
    altered = [contextualize(FeatureRecord(r0.record.timestamp, r0.record.frame_seq, "cam01",
                                           r0.record.pedestrian_id, r0.record.speed + 0.001,
                                           r0.record.direction), CTX)] + seg.records[1:]
    (res,) = authenticate_query({sid: canonical_bytes(altered)}, chain)
    assert res.verdict is Verdict.TAMPERED_OR_UNKNOWN
    assert res.chain_digest is not None and res.local_digest != res.chain_digest
    assert not all_authentic([res])


def test_unanchored_segment():
    node, chain = anchored_fog(walkers(20))
    (res,) = authenticate_query({"cam02/0": b""}, chain)
    assert res.verdict is Verdict.TAMPERED_OR_UNKNOWN and res.chain_digest is None
    assert "chain=-" in res.line()


def test_unreachable_chain():
    with pytest.raises(AuthError) as exc:
        authenticate_query({"cam01/0": b""}, DeadChain())
    assert exc.value.kind == "ChainUnavailable"


def test_every_bit_flip_of_small_segment_detected():
    node, chain = anchored_fog([FeatureRecord(1_700_000_000_000 + i, i, "cam01", i, 0.25 * i, 90.0)
                                for i in range(2)])
    (seg,) = node.store.segments()
    data = seg.canonical_bytes()
    assert len(data) <= 200
    for i in range(len(data)):
        for bit in range(8):
            forged = bytearray(data)
            forged[i] ^= 1 << bit
            (res,) = authenticate_query({seg.segment_id: bytes(forged)}, chain)
            assert res.verdict is Verdict.TAMPERED_OR_UNKNOWN, (i, bit)


def test_completeness_over_random_stores_and_queries():
    trials = 0
    for seed in range(10):
        node, chain = anchored_fog(walkers(400, ("cam01", "cam02"), seed), seed)
        rnd = random.Random(seed)
        for _ in range(100):
            a = 1_700_000_000_000 + rnd.randrange(-5_000, 40_000)
            spec = QuerySpec(camera_id=rnd.choice([None, "cam01", "cam02"]),
                             time_range=(a, a + rnd.randrange(1, 30_000)),
                             speed_range=rnd.choice([None, (0.0, rnd.random() + 1e-9)]))
            res = node.query(spec)
            payloads = node.segment_payloads(res.segment_ids)
            results = authenticate_query(payloads, chain)
            assert all(r.verdict is Verdict.AUTHENTIC for r in results)
            assert filter_verified(spec, payloads, results) == res.records
            trials += 1
    assert trials == 1000
