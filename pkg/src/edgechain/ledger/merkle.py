"""Binary SHA-256 Merkle root over transaction ids."""
from __future__ import annotations

import hashlib
from typing import Sequence

EMPTY_ROOT = bytes(32)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Pairwise SHA-256 up the tree; an odd level duplicates its last node.

    A single leaf is its own root; no leaves gives 32 zero bytes.
    """
    level = list(leaves)
    if not level:
        return EMPTY_ROOT
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha256(level[i] + level[i + 1]).digest()
                 for i in range(0, len(level), 2)]
    return level[0]
