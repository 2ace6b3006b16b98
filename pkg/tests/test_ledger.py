import hashlib
import statistics

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import given, strategies as st

from edgechain.ledger import Account, ChainNode
from edgechain.ledger.accounts import derive_address, verify_signature
from edgechain.ledger.chain import (
    Block,
    InvalidBlock,
    MissingParent,
    genesis_block,
    leading_zero_bits,
    meets_difficulty,
    solve_pow,
    validate_chain,
)
from edgechain.ledger.contract import CONTRACT_ADDRESS, Rejected, replay
from edgechain.ledger.merkle import EMPTY_ROOT, merkle_root
from edgechain.ledger.tx import (
    Transaction,
    TxKind,
    deploy_tx,
    grant_tx,
    put_record_tx,
    revoke_tx,
)

from chainkit import honest_chain, tamper_corpus

# RFC 8032 section 7.1, test 1
RFC_SK = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC_PK = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC_SIG = bytes.fromhex("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")

D = 8  # unit-test difficulty


def fixed_clock():
    t = [1_700_000_000_000]

    def clock():
        t[0] += 1000
        return t[0]
    return clock


def node(name="n", difficulty=D, **kw):
    return ChainNode(name, difficulty, clock=fixed_clock(), seed=hash(name) & 0xFFFF, **kw)


# ---- accounts ----------------------------------------------------------------

def test_address_from_rfc_vector():
    acct = Account(Ed25519PrivateKey.from_private_bytes(RFC_SK))
    assert acct.public_bytes == RFC_PK
    assert acct.address == hashlib.sha256(RFC_PK).digest()[-20:]
    assert acct.address.hex() == hashlib.sha256(RFC_PK).hexdigest()[-40:]
    assert acct.sign(b"") == RFC_SIG
    assert verify_signature(RFC_PK, RFC_SIG, b"")
    assert not verify_signature(RFC_PK, RFC_SIG, b"x")


def test_thousand_distinct_addresses():
    addrs = {Account.create().address for _ in range(1000)}
    assert len(addrs) == 1000 and all(len(a) == 20 for a in addrs)


def test_seeded_accounts_are_stable():
    assert Account.from_seed(b"x").address == Account.from_seed(b"x").address
    assert derive_address(Account.from_seed(b"x").public_bytes) == Account.from_seed(b"x").address


# ---- merkle --------------------------------------------------------------------

def merkle_oracle(leaves):
    if not leaves:
        return bytes(32)
    if len(leaves) == 1:
        return leaves[0]
    padded = leaves + leaves[-1:] if len(leaves) % 2 else leaves
    return merkle_oracle([hashlib.sha256(a + b).digest() for a, b in zip(padded[::2], padded[1::2])])


def test_merkle_small_cases():
    a, b, c = (hashlib.sha256(x).digest() for x in (b"a", b"b", b"c"))
    assert merkle_root([]) == EMPTY_ROOT
    assert merkle_root([a]) == a
    ab = hashlib.sha256(a + b).digest()
    cc = hashlib.sha256(c + c).digest()
    assert merkle_root([a, b, c]) == hashlib.sha256(ab + cc).digest()


@given(st.lists(st.binary(min_size=32, max_size=32), max_size=40))
def test_merkle_matches_recursive_oracle(leaves):
    assert merkle_root(leaves) == merkle_oracle(leaves)


# ---- transactions ----------------------------------------------------------------

def test_tx_encode_round_trip():
    acct = Account.from_seed(b"a")
    tx = put_record_tx(acct, "cam01/0", bytes(range(32)))
    again = Transaction.decode(tx.encode())
    assert again == tx and again.txid == tx.txid and again.signature_valid()


def test_tx_with_foreign_key_fails():
    a, b = Account.from_seed(b"a"), Account.from_seed(b"b")
    tx = deploy_tx(a)
    assert not tx.with_changes(public_key=b.public_bytes).signature_valid()
    assert not tx.with_changes(tx_nonce=tx.tx_nonce + 1).signature_valid()


# ---- contract rules --------------------------------------------------------------

@pytest.fixture
def world():
    owner, fog, edge = (Account.from_seed(s) for s in (b"owner", b"fog", b"edge"))
    n = node()
    n.submit_tx(deploy_tx(owner))
    n.mine_block()
    return n, owner, fog, edge


def test_deploy_then_empty_state(world):
    n, owner, _, _ = world
    assert n.contract_deployed()
    assert n.state.contract.owner == owner.address
    assert n.state.contract.authorized == set() and n.state.contract.records == {}
    assert len(CONTRACT_ADDRESS) == 20


def test_second_deploy_rejected(world):
    n, owner, fog, _ = world
    for acct in (owner, fog):
        with pytest.raises(Rejected) as exc:
            n.submit_tx(deploy_tx(acct))
        assert exc.value.kind == "AlreadyDeployed"


def test_deploy_from_any_account():
    n = node()
    n.submit_tx(deploy_tx(Account.create()))
    n.mine_block()
    assert n.contract_deployed()


def test_grant_flow_and_access_rules(world):
    n, owner, fog, edge = world
    n.submit_tx(grant_tx(owner, fog.address))
    assert not n.is_authorized(fog.address)
    n.mine_block()
    assert n.is_authorized(fog.address)
    with pytest.raises(Rejected) as exc:
        n.submit_tx(grant_tx(fog, edge.address))
    assert exc.value.kind == "NotOwner"
    assert not n.is_authorized(edge.address)
    n.submit_tx(grant_tx(owner, fog.address))  # idempotent
    n.mine_block()
    assert n.state.contract.authorized == {fog.address}


def test_bad_signature_rejected(world):
    n, owner, fog, _ = world
    tx = grant_tx(owner, fog.address)
    forged = tx.with_changes(signature=bytes(64))
    with pytest.raises(Rejected) as exc:
        n.submit_tx(forged)
    assert exc.value.kind == "BadSignature"


def test_put_record_rules(world):
    n, owner, fog, edge = world
    n.submit_tx(grant_tx(owner, fog.address))
    n.mine_block()
    d1 = hashlib.sha256(b"s1").digest()
    n.submit_tx(put_record_tx(fog, "cam01/0", d1))
    assert n.get_index_token("cam01/0") is None  # only mined state counts
    blk = n.mine_block()
    tok = n.get_index_token("cam01/0")
    assert (tok.digest, tok.height, tok.submitter) == (d1, blk.height, fog.address)
    with pytest.raises(Rejected) as exc:
        n.submit_tx(put_record_tx(edge, "cam01/10000", d1))
    assert exc.value.kind == "NotAuthorized"
    with pytest.raises(Rejected) as exc:
        n.submit_tx(put_record_tx(fog, "cam01/0", bytes(32)))
    assert exc.value.kind == "DuplicateRecord"
    assert n.get_index_token("cam01/0").digest == d1
    assert n.get_index_token("nope/0") is None


def test_duplicate_in_same_mempool(world):
    n, owner, fog, _ = world
    n.submit_tx(grant_tx(owner, fog.address))
    n.mine_block()
    n.submit_tx(put_record_tx(fog, "cam01/0", bytes(32)))
    with pytest.raises(Rejected) as exc:
        n.submit_tx(put_record_tx(fog, "cam01/0", b"\x01" * 32))
    assert exc.value.kind == "DuplicateRecord"


def test_nonce_must_increase(world):
    n, owner, fog, _ = world
    tx = grant_tx(owner, fog.address, nonce=1)  # deploy already used 1
    with pytest.raises(Rejected) as exc:
        n.submit_tx(tx)
    assert exc.value.kind == "BadNonce"


def test_revoke_blocks_writes_but_not_reads(world):
    n, owner, fog, _ = world
    n.submit_tx(grant_tx(owner, fog.address))
    n.mine_block()
    n.submit_tx(put_record_tx(fog, "cam01/0", bytes(32)))
    n.mine_block()
    n.submit_tx(revoke_tx(owner, fog.address))
    n.mine_block()
    assert not n.is_authorized(fog.address)
    with pytest.raises(Rejected):
        n.submit_tx(put_record_tx(fog, "cam01/10000", bytes(32)))
    assert n.get_index_token("cam01/0") is not None


# ---- mining ------------------------------------------------------------------------

def test_difficulty_eight_means_zero_first_byte():
    n = node(allow_empty_blocks=True)
    for _ in range(5):
        b = n.mine_block()
        assert b.block_hash[0] == 0
        assert leading_zero_bits(b.block_hash) >= 8


def test_invalid_tx_excluded_from_block(world):
    n, owner, fog, _ = world
    n.submit_tx(grant_tx(owner, fog.address))
    n.force_mempool(grant_tx(fog, fog.address))  # NotOwner, bypassing intake checks
    b = n.mine_block()
    assert [t.kind for t in b.transactions] == [TxKind.GRANT_ENTITY]
    assert b.transactions[0].sender == owner.address
    assert n.tx_status(grant_tx(fog, fog.address, nonce=1).txid).state == "rejected"


def test_nothing_to_mine():
    assert node().mine_block() is None


def test_genesis_cached_and_valid():
    g = genesis_block(D)
    assert g is genesis_block(D)
    assert g.height == 0 and g.header.prev_hash == bytes(32)
    assert meets_difficulty(g.block_hash, D)


def test_block_round_trip(world):
    n, owner, fog, _ = world
    n.submit_tx(grant_tx(owner, fog.address))
    b = n.mine_block()
    again = Block.decode(b.encode())
    assert again == b and again.block_hash == b.block_hash


# ---- replay ---------------------------------------------------------------------

def test_replay_reproduces_live_state():
    chain, _, _ = honest_chain(D, blocks=7)
    live = ChainNode("x", D)
    for b in chain[1:]:
        live.import_block(b)
    assert replay(chain) == live.state


# ---- validation ------------------------------------------------------------------

def test_honest_chain_validates():
    chain, _, _ = honest_chain(D)
    assert validate_chain(chain, D) is None
    assert validate_chain(chain[:1], D) is None


def test_payload_byte_flip_at_height_three():
    chain, _, _ = honest_chain(D)
    blk = chain[3]
    tx = blk.transactions[0]
    p = bytearray(tx.payload)
    p[3] ^= 0xFF
    forged = Block(blk.header, (tx.with_changes(payload=bytes(p)),) + blk.transactions[1:])
    v = validate_chain(chain[:3] + [forged] + chain[4:], D)
    assert v is not None and v.height == 3


@pytest.fixture(scope="module")
def corpus():
    chain, owner, _ = honest_chain(D)
    return tamper_corpus(chain, D, owner)


def test_corpus_covers_every_class(corpus):
    assert {k for k, _, _ in corpus} >= {"hash_link", "pow", "tx_root", "signature", "nonce",
                                         "access"}


def test_tamper_corpus_detected(corpus):
    for kind, height, forged in corpus:
        v = validate_chain(forged, D)
        assert v is not None, kind
        assert (v.kind, v.height) == (kind, height)


def test_validate_does_not_mutate(corpus):
    _, _, forged = corpus[0]
    before = [b.encode() for b in forged]
    validate_chain(forged, D)
    assert [b.encode() for b in forged] == before


def test_import_rejects_forged_blocks(corpus):
    for kind, height, forged in corpus:
        if kind == "genesis":
            continue
        n = ChainNode("importer", D)
        for b in forged[1:height]:
            n.import_block(b)
        with pytest.raises((InvalidBlock, MissingParent)):
            n.import_block(forged[height])


# ---- fork choice ---------------------------------------------------------------

def test_longer_chain_wins_and_orphans_attach():
    a, b = node("a", allow_empty_blocks=True), node("b", allow_empty_blocks=True)
    for _ in range(2):
        a.mine_block()
    for _ in range(3):
        b.mine_block()
    chain_b = b.chain()
    # deliver out of order: children before parents
    for blk in reversed(chain_b[1:]):
        try:
            a.import_block(blk)
        except MissingParent:
            pass
    assert a.get_tip() == b.get_tip()


def test_equal_height_tie_goes_to_lower_hash():
    a, b = node("a", allow_empty_blocks=True), node("b", allow_empty_blocks=True)
    ba, bb = a.mine_block(), b.mine_block()
    a.import_block(bb)
    b.import_block(ba)
    low = min(ba.block_hash, bb.block_hash)
    assert a.tip == b.tip == low


def test_reorg_returns_transactions_to_mempool(world):
    n, owner, fog, _ = world
    rival = ChainNode("rival", D, clock=fixed_clock(), seed=99, allow_empty_blocks=True)
    for blk in n.chain()[1:]:
        rival.import_block(blk)
    n.submit_tx(grant_tx(owner, fog.address))
    mined = n.mine_block()
    for _ in range(2):
        rival.mine_block()
    for blk in rival.chain()[2:]:
        n.import_block(blk)
    assert n.tip == rival.tip
    assert mined.transactions[0].txid in n.mempool
    assert n.tx_status(mined.transactions[0].txid).state == "pending"


def test_pow_attempts_double_per_bit():
    """Mean attempts per block doubles with each extra difficulty bit, within 3x."""
    means = {}
    for bits in range(6, 12):
        attempts = [solve_pow(1, bytes(32), bytes(32), i, bits, start_nonce=i << 40)[1]
                    for i in range(40)]
        means[bits] = statistics.mean(attempts)
    for bits in range(6, 11):
        ratio = means[bits + 1] / means[bits]
        assert 2 / 3 <= ratio <= 2 * 3, (bits, ratio)
    for bits, m in means.items():
        assert 2 ** bits / 3 <= m <= 2 ** bits * 3
