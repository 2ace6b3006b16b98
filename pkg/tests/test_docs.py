"""The byte layouts in WIRE.md, CANONICAL.md and BENCH.md match the code."""
import hashlib
import re
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from edgechain.channel import OAEP, Phase, Role, SessionState, key_digest, send_data
from edgechain.features import FeatureRecord
from edgechain.harness.bench import CSV_FIELDS, SUMMARY_FIELDS
from edgechain.index import ContextConfig, canonical_bytes, contextualize
from edgechain.ledger.accounts import Account
from edgechain.ledger.chain import genesis_block
from edgechain.ledger.tx import Transaction, put_record_tx
from edgechain.rpc import encode_request
from edgechain.transport import memory_pipe
from edgechain.wire import Frame, FrameType, encode_fields

ROOT = Path(__file__).resolve().parent.parent
BLOCK = re.compile(r"```(hex|text) golden=([\w-]+)\n(.*?)```", re.S)


def goldens(doc):
    out = {}
    for kind, name, body in BLOCK.findall((ROOT / doc).read_text()):
        if kind == "hex":
            hexstr = "".join(line.split("#", 1)[0] for line in body.splitlines())
            out[name] = bytes.fromhex("".join(hexstr.split()))
        else:
            out[name] = body.rstrip("\n").encode()
    return out


WIRE = goldens("WIRE.md")
CANON = goldens("CANONICAL.md")

SID = bytes(range(16))
NONCE = bytes(range(16, 32))
KEY = bytes(range(32, 64))


def test_every_golden_is_checked():
    assert set(WIRE) == {"fields-ab-empty", "hello", "key-confirm", "ack", "close",
                         "data-1-hello", "rpc-get-index-token", "rpc-ok-empty", "tx-put-record",
                         "tx-put-record-txid", "genesis-16-header", "genesis-16-hash"}
    assert set(CANON) == {"empty-sha256", "five-records", "five-records-sha256"}


def test_fields():
    assert encode_fields(b"ab", b"") == WIRE["fields-ab-empty"]


@pytest.mark.parametrize("name,frame", [
    ("hello", Frame(FrameType.HELLO, encode_fields(SID, NONCE))),
    ("ack", Frame(FrameType.ACK, encode_fields(SID))),
    ("close", Frame(FrameType.CLOSE, encode_fields(SID))),
])
def test_handshake_frames(name, frame):
    assert frame.encode() == WIRE[name]


def test_key_confirm_digest_is_salted_sha256():
    digest = hashlib.sha256(KEY + NONCE).digest()
    assert key_digest(KEY, NONCE) == digest
    assert Frame(FrameType.KEY_CONFIRM, encode_fields(SID, digest)).encode() == WIRE["key-confirm"]


def test_data_frame_golden_and_independent_gcm():
    state = SessionState(role=Role.INITIATOR, session_id=SID, phase=Phase.ESTABLISHED)
    state._set_key(KEY)
    frame = send_data(state, b"hello")
    assert frame.encode() == WIRE["data-1-hello"]
    # rebuild the body straight from the layout rules
    nonce = b"\x01\x00\x00\x00" + (1).to_bytes(8, "big")
    body = nonce + AESGCM(KEY).encrypt(nonce, (1).to_bytes(8, "big") + b"hello", SID)
    assert WIRE["data-1-hello"] == bytes([6]) + len(body).to_bytes(4, "big") + body


def test_key_transport_layout(fog_keys):
    from edgechain.channel import handle_frame, initiate_handshake, new_responder
    client_end, server_end = memory_pipe()
    client = initiate_handshake(client_end)
    server = new_responder(fog_keys)
    cert = handle_frame(server, server_end.recv_frame(0))
    kt = handle_frame(client, cert)
    assert kt.frame_type is FrameType.KEY_TRANSPORT
    raw = kt.encode()
    assert len(raw) == 285
    assert raw[5:9] == (16).to_bytes(4, "big") and raw[9:25] == client.session_id
    assert raw[25:29] == (256).to_bytes(4, "big")
    plain = fog_keys.private_key.decrypt(raw[29:], OAEP)
    assert plain == bytes(client.shared_key) + client.initiator_nonce


def test_rpc_bodies():
    assert encode_request("get_index_token", b"cam01/1700000000000") == WIRE["rpc-get-index-token"]
    assert encode_fields(b"ok") == WIRE["rpc-ok-empty"]


def test_transaction_golden():
    acct = Account.from_seed(b"golden")
    tx = put_record_tx(acct, "cam01/1700000000000", hashlib.sha256(b"").digest(), nonce=1)
    assert tx.encode() == WIRE["tx-put-record"]
    assert hashlib.sha256(WIRE["tx-put-record"]).digest() == WIRE["tx-put-record-txid"] == tx.txid
    assert acct.address == hashlib.sha256(acct.public_bytes).digest()[-20:]
    assert Transaction.decode(WIRE["tx-put-record"]).signature_valid()


def test_genesis_golden():
    g = genesis_block(16)
    assert g.header.encode() == WIRE["genesis-16-header"]
    assert hashlib.sha256(WIRE["genesis-16-header"]).digest() == WIRE["genesis-16-hash"]
    assert g.block_hash == WIRE["genesis-16-hash"]


def test_canonical_goldens():
    assert hashlib.sha256(b"").digest() == CANON["empty-sha256"] == \
        hashlib.sha256(canonical_bytes([])).digest()
    ctx = ContextConfig(zones={"cam01": "lobby"})
    rows = [(1700000003000, 30, 2, 0.1, 90.0), (1700000001000, 10, 7, 1e-05, 359.5),
            (1700000003000, 30, 1, 0.75, 0.0), (1700000001000, 10, 3, 100.0, 180.25),
            (1700036000000, 4, 0, 0.3, 45.5)]
    recs = [contextualize(FeatureRecord(ts, seq, "cam01", pid, sp, d), ctx)
            for ts, seq, pid, sp, d in rows]
    data = canonical_bytes(recs)
    assert data == CANON["five-records"]
    assert len(data) == 278
    assert hashlib.sha256(data).digest() == CANON["five-records-sha256"]


def test_bench_csv_headers_documented():
    text = (ROOT / "BENCH.md").read_text()
    assert f"`{','.join(CSV_FIELDS)}`" in text
    assert f"`{','.join(SUMMARY_FIELDS)}`" in text
