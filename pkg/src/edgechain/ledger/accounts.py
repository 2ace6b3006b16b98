"""Ed25519 accounts whose address doubles as the entity's Virtual Identity."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

ADDRESS_LEN = 20
PUBKEY_LEN = 32
SIGNATURE_LEN = 64


def derive_address(public_key: bytes) -> bytes:
    """Last 20 bytes of SHA-256 over the raw public key."""
    return hashlib.sha256(public_key).digest()[-ADDRESS_LEN:]


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass
class Account:
    private_key: Ed25519PrivateKey
    last_nonce: int = 0

    @classmethod
    def create(cls, rng=os.urandom) -> "Account":
        return cls(Ed25519PrivateKey.from_private_bytes(rng(32)))

    @classmethod
    def from_seed(cls, seed: bytes) -> "Account":
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))

    @property
    def seed_bytes(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
            serialization.NoEncryption())

    @property
    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @property
    def address(self) -> bytes:
        return derive_address(self.public_bytes)

    def sign(self, message: bytes) -> bytes:
        return self.private_key.sign(message)

    def next_nonce(self) -> int:
        self.last_nonce += 1
        return self.last_nonce
