"""Ledger transaction envelope shared by the identity, credential and ledger layers."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

from .crypto import canonical, digest, new_nonce, sign


class TxnKind(str, Enum):
    DID_REG = "DID_REG"
    SCHEMA = "SCHEMA"
    CRED_DEF = "CRED_DEF"
    CRED_REG = "CRED_REG"
    CRED_REVOKE = "CRED_REVOKE"
    DID_REVOKE = "DID_REVOKE"
    ROTATE = "ROTATE"


@dataclass(frozen=True, eq=False)
class Transaction:
    kind: TxnKind
    payload: dict
    author: str
    nonce: bytes
    timestamp: int
    author_signature: bytes = field(default=b"", repr=False)

    def signing_bytes(self) -> bytes:
        return canonical(
            {
                "kind": self.kind.value,
                "payload": self.payload,
                "author": self.author,
                "nonce": self.nonce,
                "timestamp": self.timestamp,
            }
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "payload": self.payload,
            "author": self.author,
            "nonce": self.nonce.hex(),
            "timestamp": self.timestamp,
            "author_signature": self.author_signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(
            kind=TxnKind(d["kind"]),
            payload=d["payload"],
            author=d["author"],
            nonce=bytes.fromhex(d["nonce"]),
            timestamp=int(d["timestamp"]),
            author_signature=bytes.fromhex(d["author_signature"]),
        )

    @cached_property
    def canonical_bytes(self) -> bytes:
        return canonical(self.to_dict())

    @cached_property
    def txn_id(self) -> str:
        return digest(self.canonical_bytes).hex()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Transaction) and self.canonical_bytes == other.canonical_bytes

    def __hash__(self) -> int:
        return hash(self.canonical_bytes)


def make_txn(
    kind: TxnKind,
    payload: dict,
    author: str,
    secret_key: bytes,
    *,
    timestamp: int,
    rng: random.Random | None = None,
    nonce: bytes | None = None,
) -> Transaction:
    unsigned = Transaction(kind, payload, str(author), nonce or new_nonce(rng), int(timestamp))
    return Transaction(
        unsigned.kind,
        unsigned.payload,
        unsigned.author,
        unsigned.nonce,
        unsigned.timestamp,
        sign(secret_key, unsigned.signing_bytes()),
    )
