"""Consortium ledger: transaction validation, block application, snapshots.

State is never mutated in place. ``apply_block`` returns a new
:class:`LedgerState` that shares unchanged storage with its parent, so any
state object doubles as an immutable snapshot.

Each keyed map is split into 256 buckets by the first byte of
``sha256(key)``. A bucket digest is the hash of the canonical serialization
of its key-sorted ``[key, value]`` entries; the map digest hashes the 256
bucket digests in order and the state root hashes the canonical
``{map name: map digest}`` object. Applying a block only rehashes the
buckets it touched.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator

from .credentials import (
    VIN_ATTRIBUTE,
    CredentialCore,
    CredentialDefinition,
    Schema,
    check_attribute_names,
    commitment_root,
)
from .crypto import DIGEST_SIZE, PUBLIC_KEY_SIZE, canonical, digest, verify
from .errors import NotFoundError, ValidationError, Verdict
from .identity import Did, DidDocument, did_from_key
from .replay import WINDOW_S
from .txn import Transaction, TxnKind

__all__ = [
    "Block",
    "BlockStore",
    "ChainError",
    "LedgerState",
    "LedgerView",
    "Transaction",
    "TxnKind",
    "apply_block",
    "build_block",
    "genesis_state",
    "make_genesis",
    "replay",
    "snapshot",
    "validate_txn",
]

ZERO_HASH = bytes(DIGEST_SIZE)
REGISTRAR_ONLY = frozenset(
    {TxnKind.SCHEMA, TxnKind.CRED_DEF, TxnKind.CRED_REG, TxnKind.CRED_REVOKE, TxnKind.DID_REVOKE}
)


class ChainError(ValidationError):
    """A block does not extend the current chain or its state root is wrong."""


class BucketMap:
    """Copy-on-write map with cached per-bucket digests."""

    NBUCKETS = 256
    _EMPTY = digest(canonical([]))

    def __init__(self) -> None:
        self._buckets: list[dict[str, Any]] = [{} for _ in range(self.NBUCKETS)]
        self._digests: list[bytes] = [self._EMPTY] * self.NBUCKETS
        self._owned: set[int] = set(range(self.NBUCKETS))
        self._dirty: set[int] = set()
        self._size = 0

    @staticmethod
    def _index(key: str) -> int:
        return hashlib.sha256(key.encode("utf-8")).digest()[0]

    def evolve(self) -> "BucketMap":
        self.digest()
        child = BucketMap.__new__(BucketMap)
        child._buckets = list(self._buckets)
        child._digests = list(self._digests)
        child._owned = set()
        child._dirty = set()
        child._size = self._size
        return child

    def get(self, key: str, default: Any = None) -> Any:
        return self._buckets[self._index(key)].get(key, default)

    def __getitem__(self, key: str) -> Any:
        return self._buckets[self._index(key)][key]

    def __contains__(self, key: str) -> bool:
        return key in self._buckets[self._index(key)]

    def __len__(self) -> int:
        return self._size

    def __setitem__(self, key: str, value: Any) -> None:
        i = self._index(key)
        if i not in self._owned:
            self._buckets[i] = dict(self._buckets[i])
            self._owned.add(i)
        if key not in self._buckets[i]:
            self._size += 1
        self._buckets[i][key] = value
        self._dirty.add(i)

    def __delitem__(self, key: str) -> None:
        i = self._index(key)
        if i not in self._owned:
            self._buckets[i] = dict(self._buckets[i])
            self._owned.add(i)
        del self._buckets[i][key]
        self._size -= 1
        self._dirty.add(i)

    def items(self) -> Iterator[tuple[str, Any]]:
        for bucket in self._buckets:
            yield from bucket.items()

    def keys(self) -> Iterator[str]:
        for bucket in self._buckets:
            yield from bucket

    def digest(self) -> bytes:
        for i in sorted(self._dirty):
            b = self._buckets[i]
            self._digests[i] = digest(canonical([[k, b[k]] for k in sorted(b)]))
        self._dirty.clear()
        return digest(b"".join(self._digests))

    def freeze(self) -> "BucketMap":
        self.digest()
        self._owned = set()
        return self


_MAPS = ("did_documents", "schemas", "schema_index", "cred_defs", "cred_registry", "vin_index", "seen_nonces")


@dataclass(eq=False)
class LedgerState:
    height: int = -1
    last_hash: bytes = ZERO_HASH
    time: int = 0
    registrars: frozenset[str] = frozenset()
    nodes: dict[str, str] = field(default_factory=dict)
    did_documents: BucketMap = field(default_factory=BucketMap)
    schemas: BucketMap = field(default_factory=BucketMap)
    schema_index: BucketMap = field(default_factory=BucketMap)
    cred_defs: BucketMap = field(default_factory=BucketMap)
    cred_registry: BucketMap = field(default_factory=BucketMap)
    vin_index: BucketMap = field(default_factory=BucketMap)
    seen_nonces: BucketMap = field(default_factory=BucketMap)
    applied: tuple[str, ...] = ()
    rejections: tuple[tuple[str, str], ...] = ()

    def evolve(self) -> "LedgerState":
        kw = {name: getattr(self, name).evolve() for name in _MAPS}
        return LedgerState(
            height=self.height,
            last_hash=self.last_hash,
            time=self.time,
            registrars=self.registrars,
            nodes=self.nodes,
            **kw,
        )

    def freeze(self) -> "LedgerState":
        for name in _MAPS:
            getattr(self, name).freeze()
        return self

    @cached_property
    def state_root(self) -> bytes:
        """Digest of every map; independent of height and block metadata."""
        maps = {name: getattr(self, name).digest() for name in _MAPS}
        maps["registrars"] = digest(canonical(sorted(self.registrars)))
        maps["nodes"] = digest(canonical(self.nodes))
        return digest(canonical(maps))


# -- blocks ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    txns: tuple[Transaction, ...]
    state_root: bytes
    genesis: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "timestamp": self.timestamp,
            "txns": [t.to_dict() for t in self.txns],
            "state_root": self.state_root.hex(),
        }
        if self.genesis is not None:
            d["genesis"] = self.genesis
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(
            d["height"],
            bytes.fromhex(d["prev_hash"]),
            d["timestamp"],
            tuple(Transaction.from_dict(t) for t in d["txns"]),
            bytes.fromhex(d["state_root"]),
            d.get("genesis"),
        )

    @cached_property
    def canonical_bytes(self) -> bytes:
        return canonical(self.to_dict())

    @cached_property
    def digest(self) -> bytes:
        return digest(self.canonical_bytes)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Block) and self.canonical_bytes == other.canonical_bytes

    def __hash__(self) -> int:
        return hash(self.digest)


def make_genesis(
    registrars: Iterable[tuple[Did | str, bytes]],
    nodes: dict[str, bytes],
    *,
    timestamp: int,
) -> Block:
    """Height-0 block naming the founding registrars and consensus nodes."""
    info = {
        "registrars": sorted([str(d), pk.hex()] for d, pk in registrars),
        "nodes": {str(k): v.hex() for k, v in sorted(nodes.items())},
    }
    state = _genesis_apply(info, timestamp)
    return Block(0, ZERO_HASH, timestamp, (), state.state_root, info)


def _genesis_apply(info: dict, timestamp: int) -> LedgerState:
    state = LedgerState().evolve()
    for did_s, pk_hex in info["registrars"]:
        pk = bytes.fromhex(pk_hex)
        did = Did.parse(did_s)
        if did != did_from_key(pk):
            raise ChainError(f"genesis registrar {did_s} does not match its key")
        state.did_documents[did_s] = DidDocument(did, pk, (), timestamp, timestamp)
    state.registrars = frozenset(d for d, _ in info["registrars"])
    state.nodes = dict(info["nodes"])
    return state


def genesis_state(block: Block) -> LedgerState:
    if block.height != 0 or block.genesis is None:
        raise ChainError("not a genesis block")
    state = _genesis_apply(block.genesis, block.timestamp)
    state.height = 0
    state.time = block.timestamp
    state.last_hash = block.digest
    state.freeze()
    if state.state_root != block.state_root:
        raise ChainError("genesis state root mismatch")
    return state


# -- validation ------------------------------------------------------------


def _active_doc(state: LedgerState, did: str) -> DidDocument | None:
    return state.did_documents.get(did)


def _check_payload(state: LedgerState, txn: Transaction) -> str | None:
    p = txn.payload
    kind = txn.kind

    if kind is TxnKind.DID_REG:
        pk = bytes.fromhex(p["public_key"])
        if len(pk) != PUBLIC_KEY_SIZE or p["did"] != str(did_from_key(pk)) or txn.author != p["did"]:
            return "malformed"
        if not verify(pk, txn.signing_bytes(), txn.author_signature):
            return "bad-signature"
        if p["did"] in state.did_documents:
            return "duplicate-did"
        return None

    author = _active_doc(state, txn.author)
    if author is None:
        return "unknown-author"
    if author.revoked:
        return "revoked-author"
    if not verify(author.active_public_key, txn.signing_bytes(), txn.author_signature):
        return "bad-signature"
    if kind in REGISTRAR_ONLY and txn.author not in state.registrars:
        return "permission"

    if kind is TxnKind.ROTATE:
        if p["did"] != txn.author:
            return "permission"
        new_pk = bytes.fromhex(p["new_public_key"])
        if len(new_pk) != PUBLIC_KEY_SIZE:
            return "malformed"
        if new_pk == author.active_public_key or any(new_pk == k for k, _ in author.previous_keys):
            return "key-reuse"
        return None

    if kind is TxnKind.SCHEMA:
        schema = Schema.from_dict(p)
        try:
            check_attribute_names(schema.attribute_names)
        except ValidationError:
            return "malformed"
        if schema.issuer != txn.author or not schema.verify_signature(author.active_public_key):
            return "bad-schema"
        if f"{schema.issuer}|{schema.name}|{schema.version}" in state.schema_index:
            return "duplicate-schema"
        return None

    if kind is TxnKind.CRED_DEF:
        cdef = CredentialDefinition.from_dict(p)
        if cdef.schema_ref not in state.schemas:
            return "unknown-schema"
        if (
            cdef.issuer != txn.author
            or cdef.issuer_public_key != author.active_public_key
            or not cdef.verify_signature()
        ):
            return "bad-cred-def"
        if cdef.ref in state.cred_defs:
            return "duplicate-cred-def"
        return None

    if kind is TxnKind.CRED_REG:
        core = CredentialCore.from_dict(p["credential"])
        cdef = state.cred_defs.get(core.cred_def_ref)
        if cdef is None:
            return "unknown-cred-def"
        if cdef.issuer != txn.author or core.issuer != txn.author:
            return "not-issuer"
        subject = _active_doc(state, core.subject)
        if subject is None:
            return "unknown-subject"
        if subject.revoked:
            return "revoked-subject"
        schema = state.schemas[cdef.schema_ref]
        commitments = {n: bytes.fromhex(c) for n, c in p["commitments"].items()}
        if set(commitments) != set(schema.attribute_names) or any(len(c) != DIGEST_SIZE for c in commitments.values()):
            return "bad-credential"
        if commitment_root(commitments) != core.commitment_root:
            return "bad-credential"
        if not verify(author.active_public_key, core.signing_bytes(), core.issuer_signature):
            return "bad-credential"
        if core.commitment_root.hex() in state.cred_registry:
            return "duplicate-credential"
        tag = p.get("vin_tag")
        if VIN_ATTRIBUTE in schema.attribute_names:
            if not isinstance(tag, str) or len(tag) != 2 * DIGEST_SIZE:
                return "malformed"
            if tag in state.vin_index:
                return "duplicate-vin"
        elif tag is not None:
            return "malformed"
        return None

    if kind is TxnKind.CRED_REVOKE:
        entry = state.cred_registry.get(p["commitment_root"])
        if entry is None:
            return "unknown-credential"
        if entry["issuer"] != txn.author:
            return "not-issuer"
        if entry["revoked"]:
            return "already-revoked"
        return None

    if kind is TxnKind.DID_REVOKE:
        target = _active_doc(state, p["did"])
        if target is None:
            return "unknown-did"
        if target.revoked:
            return "already-revoked"
        return None

    return "malformed"


def validate_txn(state: LedgerState, txn: Transaction, now: int) -> Verdict:
    """Check one transaction against ``state`` at ledger time ``now``."""
    if abs(txn.timestamp - now) > WINDOW_S:
        return Verdict.fail("bad-timestamp")
    if f"{txn.author}|{txn.nonce.hex()}" in state.seen_nonces:
        return Verdict.fail("replay")
    try:
        reason = _check_payload(state, txn)
    except (KeyError, TypeError, ValueError, AttributeError):
        reason = "malformed"
    return Verdict.fail(reason) if reason else Verdict.success()


def _apply_txn(state: LedgerState, txn: Transaction, now: int) -> None:
    p = txn.payload
    kind = txn.kind
    state.seen_nonces[f"{txn.author}|{txn.nonce.hex()}"] = txn.timestamp
    if kind is TxnKind.DID_REG:
        did = Did.parse(p["did"])
        state.did_documents[p["did"]] = DidDocument(did, bytes.fromhex(p["public_key"]), (), now, now)
    elif kind is TxnKind.ROTATE:
        doc = state.did_documents[p["did"]]
        state.did_documents[p["did"]] = doc.with_rotation(bytes.fromhex(p["new_public_key"]), now)
    elif kind is TxnKind.DID_REVOKE:
        doc = state.did_documents[p["did"]]
        state.did_documents[p["did"]] = doc.with_revocation(now)
    elif kind is TxnKind.SCHEMA:
        schema = Schema.from_dict(p)
        state.schemas[schema.ref] = schema
        state.schema_index[f"{schema.issuer}|{schema.name}|{schema.version}"] = schema.ref
    elif kind is TxnKind.CRED_DEF:
        cdef = CredentialDefinition.from_dict(p)
        state.cred_defs[cdef.ref] = cdef
    elif kind is TxnKind.CRED_REG:
        core = CredentialCore.from_dict(p["credential"])
        root = core.commitment_root.hex()
        tag = p.get("vin_tag")
        state.cred_registry[root] = {
            "subject": core.subject,
            "issuer": core.issuer,
            "cred_def_ref": core.cred_def_ref,
            "vin_tag": tag,
            "issued_at": core.issued_at,
            "revoked": False,
        }
        if tag is not None:
            state.vin_index[tag] = root
    elif kind is TxnKind.CRED_REVOKE:
        root = p["commitment_root"]
        entry = dict(state.cred_registry[root], revoked=True)
        state.cred_registry[root] = entry
        tag = entry.get("vin_tag")
        if tag is not None and state.vin_index.get(tag) == root:
            del state.vin_index[tag]


def _apply_txns(state: LedgerState, txns: Iterable[Transaction], now: int) -> LedgerState:
    new = state.evolve()
    applied, rejections = [], []
    for txn in txns:
        verdict = validate_txn(new, txn, now)
        if verdict:
            _apply_txn(new, txn, now)
            applied.append(txn.txn_id)
        else:
            rejections.append((txn.txn_id, verdict.reason))
    new.applied = tuple(applied)
    new.rejections = tuple(rejections)
    new.time = now
    return new.freeze()


def build_block(state: LedgerState, txns: Iterable[Transaction], timestamp: int) -> tuple[Block, LedgerState]:
    """Assemble the next block over ``state`` and return it with the resulting state."""
    txns = tuple(txns)
    new = _apply_txns(state, txns, timestamp)
    block = Block(state.height + 1, state.last_hash, timestamp, txns, new.state_root)
    new.height = block.height
    new.last_hash = block.digest
    return block, new


def apply_block(state: LedgerState, block: Block) -> LedgerState:
    """Apply a committed block. Invalid transactions are skipped and listed in
    ``rejections`` on the returned state; chain linkage errors raise."""
    if block.height != state.height + 1:
        raise ChainError(f"expected height {state.height + 1}, got {block.height}")
    if block.prev_hash != state.last_hash:
        raise ChainError(f"block {block.height} does not extend the chain")
    if block.timestamp < state.time:
        raise ChainError(f"block {block.height} goes back in time")
    new = _apply_txns(state, block.txns, block.timestamp)
    if new.state_root != block.state_root:
        raise ChainError(f"state root mismatch at height {block.height}")
    new.height = block.height
    new.last_hash = block.digest
    return new


def replay(blocks: Iterable[Block]) -> LedgerState:
    it = iter(blocks)
    state = genesis_state(next(it))
    for block in it:
        state = apply_block(state, block)
    return state


# -- queries ---------------------------------------------------------------


class LedgerView:
    """Read-only queries over one committed state."""

    def __init__(self, state: LedgerState):
        self._state = state

    @property
    def height(self) -> int:
        return self._state.height

    @property
    def time(self) -> int:
        return self._state.time

    @property
    def state_root(self) -> bytes:
        return self._state.state_root

    @property
    def registrars(self) -> frozenset[str]:
        return self._state.registrars

    def _get(self, table: BucketMap, key: str, what: str) -> Any:
        value = table.get(key)
        if value is None:
            raise NotFoundError(f"{what} not found: {key}")
        return value

    def did_document(self, did: str) -> DidDocument:
        return self._get(self._state.did_documents, str(did), "DID")

    def schema(self, ref: str) -> Schema:
        return self._get(self._state.schemas, ref, "schema")

    def cred_def(self, ref: str) -> CredentialDefinition:
        return self._get(self._state.cred_defs, ref, "credential definition")

    def credential(self, root_hex: str) -> dict:
        return self._get(self._state.cred_registry, root_hex, "credential")

    def schema_ref(self, issuer: str, name: str, version: str) -> str:
        return self._get(self._state.schema_index, f"{issuer}|{name}|{version}", "schema")

    def vin_live(self, tag: str) -> bool:
        return tag in self._state.vin_index

    def is_registrar(self, did: str) -> bool:
        return str(did) in self._state.registrars

    def live_credentials(self) -> list[str]:
        return [root for root, e in self._state.cred_registry.items() if not e["revoked"]]

    def cred_defs_by(self, issuer: str) -> list[CredentialDefinition]:
        return sorted((c for _, c in self._state.cred_defs.items() if c.issuer == issuer), key=lambda c: c.ref)

    def query(self, kind: str, key: str = "") -> Any:
        """Generic lookup used by the CLI; returns JSON-ready data."""
        kind = kind.replace("_", "-")
        if kind == "did":
            return self.did_document(key).to_dict()
        if kind == "schema":
            return self.schema(key).to_dict()
        if kind == "cred-def":
            return self.cred_def(key).to_dict()
        if kind == "credential":
            return dict(self.credential(key))
        if kind == "registrars":
            return sorted(self.registrars)
        if kind == "height":
            return self.height
        if kind == "state-root":
            return self.state_root.hex()
        raise ValidationError(f"unknown query kind {kind!r}")


def snapshot(state: LedgerState) -> LedgerView:
    return LedgerView(state)


# -- persistence -----------------------------------------------------------


class BlockStore:
    """Append-only file of u32-length-prefixed canonical blocks."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def append(self, block: Block) -> None:
        data = block.canonical_bytes
        with open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(data)) + data)
            fh.flush()

    def load(self) -> list[Block]:
        if not self.path.exists():
            return []
        raw = self.path.read_bytes()
        blocks, off = [], 0
        while off < len(raw):
            if off + 4 > len(raw):
                break
            (n,) = struct.unpack_from(">I", raw, off)
            chunk = raw[off + 4 : off + 4 + n]
            if len(chunk) < n:
                break  # torn final write
            blocks.append(Block.from_dict(json.loads(chunk)))
            off += 4 + n
        return blocks
