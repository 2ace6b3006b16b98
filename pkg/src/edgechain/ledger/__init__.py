"""Toy proof-of-work ledger hosting the index-authentication contract."""
from .accounts import Account, derive_address, verify_signature
from .chain import (
    Block,
    BlockHeader,
    ChainNode,
    InvalidBlock,
    MissingParent,
    TxStatus,
    Violation,
    genesis_block,
    meets_difficulty,
    solve_pow,
    validate_chain,
)
from .contract import (
    ABI_FUNCTIONS,
    CONTRACT_ADDRESS,
    ContractState,
    IndexToken,
    LedgerState,
    Rejected,
    replay,
)
from .merkle import merkle_root
from .tx import (
    Transaction,
    TxKind,
    deploy_tx,
    grant_tx,
    put_record_tx,
    revoke_tx,
)

__all__ = [
    "ABI_FUNCTIONS", "CONTRACT_ADDRESS", "Account", "Block", "BlockHeader", "ChainNode",
    "ContractState", "IndexToken", "InvalidBlock", "LedgerState", "MissingParent", "Rejected",
    "Transaction", "TxKind", "TxStatus", "Violation", "deploy_tx", "derive_address",
    "genesis_block", "grant_tx", "meets_difficulty", "merkle_root", "put_record_tx", "replay",
    "revoke_tx", "solve_pow", "validate_chain", "verify_signature",
]
