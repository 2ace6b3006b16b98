"""Chain node RPC: server-side handlers and a client with the ChainNode read/submit API."""
from __future__ import annotations

import time

from ..rpc import RemoteError, RpcClient
from ..wire import decode_uint, encode_uint
from .chain import Block, ChainNode, InvalidBlock, MissingParent, TxStatus
from .contract import IndexToken, Rejected
from .tx import Transaction


def chain_handlers(node: ChainNode, *, fetch_parent=None) -> dict:
    """RPC handlers for ``node``. ``fetch_parent(origin, hash)`` resolves orphans."""

    def get_index_token(args):
        token = node.get_index_token(args[0].decode())
        if token is None:
            return []
        return [token.digest, encode_uint(token.height), token.submitter]

    def submit_tx(args):
        return [node.submit_tx(Transaction.decode(args[0]))]

    def get_block(args):
        ref = args[0]
        block = node.get_block(decode_uint(ref) if len(ref) == 8 else ref)
        return [] if block is None else [block.encode()]

    def get_tip(args):
        tip, height = node.get_tip()
        return [tip, encode_uint(height)]

    def tx_status(args):
        st = node.tx_status(args[0])
        return [st.state.encode(), encode_uint(st.height or 0), (st.reason or "").encode()]

    def nonce_of(args):
        return [encode_uint(node.nonce_of(args[0]))]

    def announce_block(args):
        block = Block.decode(args[0])
        origin = args[1].decode() if len(args) > 1 else ""
        while True:
            try:
                node.import_block(block)
                return []
            except MissingParent as exc:
                if fetch_parent is None or not origin:
                    return []
                parent = fetch_parent(origin, exc.parent_hash)
                if parent is None:
                    return []
                block = parent
            except InvalidBlock:
                return []

    def announce_tx(args):
        node.receive_tx(Transaction.decode(args[0]))
        return []

    return {
        "get_index_token": get_index_token, "submit_tx": submit_tx, "get_block": get_block,
        "get_tip": get_tip, "tx_status": tx_status, "nonce_of": nonce_of,
        "announce_block": announce_block, "announce_tx": announce_tx,
    }


class ChainClient:
    """Remote counterpart of the ChainNode read/submit methods."""

    def __init__(self, endpoint: str, **rpc_options):
        self.endpoint = endpoint
        self.rpc = RpcClient(endpoint, **rpc_options)

    def _call(self, method, *args):
        try:
            return self.rpc.call(method, *args)
        except RemoteError as exc:
            if exc.kind in ("BadSignature", "BadNonce", "Malformed", "AlreadyDeployed",
                            "NotDeployed", "NotOwner", "NotAuthorized", "DuplicateRecord"):
                raise Rejected(exc.kind, str(exc)) from None
            raise

    def get_index_token(self, segment_id: str) -> IndexToken | None:
        out = self._call("get_index_token", segment_id.encode())
        if not out:
            return None
        digest, height, submitter = out
        return IndexToken(digest, decode_uint(height), submitter)

    def submit_tx(self, tx: Transaction) -> bytes:
        return self._call("submit_tx", tx.encode())[0]

    def get_block(self, ref: bytes | int) -> Block | None:
        arg = encode_uint(ref) if isinstance(ref, int) else ref
        out = self._call("get_block", arg)
        return Block.decode(out[0]) if out else None

    def get_tip(self) -> tuple[bytes, int]:
        tip, height = self._call("get_tip")
        return tip, decode_uint(height)

    def tx_status(self, txid: bytes) -> TxStatus:
        state, height, reason = self._call("tx_status", txid)
        state = state.decode()
        return TxStatus(state, decode_uint(height) if state == "mined" else None,
                        reason.decode() or None)

    def nonce_of(self, address: bytes) -> int:
        return decode_uint(self._call("nonce_of", address)[0])

    def announce_block(self, block: Block, origin: str = "") -> None:
        self._call("announce_block", block.encode(), origin.encode())

    def announce_tx(self, tx: Transaction) -> None:
        self._call("announce_tx", tx.encode())

    def close(self) -> None:
        self.rpc.close()


def wait_mined(chain, txid: bytes, timeout: float = 30.0, poll: float = 0.05) -> TxStatus:
    """Poll ``chain.tx_status`` until the transaction is mined or rejected."""
    deadline = time.monotonic() + timeout
    while True:
        st = chain.tx_status(txid)
        if st.state in ("mined", "rejected") or time.monotonic() > deadline:
            return st
        time.sleep(poll)
