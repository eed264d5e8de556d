"""DIDs, DID documents, key rotation/revocation and pairwise peer DIDs."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Protocol

import base58

from .crypto import PUBLIC_KEY_SIZE, KeyPair, digest, keygen
from .errors import CryptoError, NotFoundError, PeerDidError, Rejected, ValidationError, WalletError
from .txn import Transaction, TxnKind, make_txn
from .wallet import Wallet

METHOD = "vdkms"
PEER_METHOD = "vdkms:peer"


@dataclass(frozen=True, order=True)
class Did:
    method: str
    identifier: str

    def __str__(self) -> str:
        return f"did:{self.method}:{self.identifier}"

    def render(self) -> str:
        return str(self)

    @property
    def is_peer(self) -> bool:
        return self.method == PEER_METHOD

    @classmethod
    def parse(cls, text: "str | Did") -> "Did":
        if isinstance(text, Did):
            return text
        if text.startswith(f"did:{PEER_METHOD}:"):
            method, ident = PEER_METHOD, text[len(f"did:{PEER_METHOD}:"):]
        elif text.startswith(f"did:{METHOD}:"):
            method, ident = METHOD, text[len(f"did:{METHOD}:"):]
        else:
            raise ValidationError(f"not a vdkms DID: {text!r}")
        try:
            raw = base58.b58decode(ident)
        except ValueError as exc:
            raise ValidationError(f"bad DID identifier: {ident!r}") from exc
        if len(raw) != 32 or base58.b58encode(raw).decode() != ident:
            raise ValidationError(f"bad DID identifier: {ident!r}")
        return cls(method, ident)


def did_from_key(pk: bytes, peer: bool = False) -> Did:
    if not isinstance(pk, (bytes, bytearray)) or len(pk) != PUBLIC_KEY_SIZE:
        raise CryptoError(f"public key must be {PUBLIC_KEY_SIZE} bytes")
    ident = base58.b58encode(digest(bytes(pk))).decode("ascii")
    return Did(PEER_METHOD if peer else METHOD, ident)


@dataclass(frozen=True)
class DidDocument:
    id: Did
    active_public_key: bytes
    previous_keys: tuple[tuple[bytes, int], ...] = ()
    created_at: int = 0
    updated_at: int = 0
    revoked: bool = False

    def key_at(self, t: int) -> bytes | None:
        """The key that was active at unix time ``t``, or None."""
        start = self.created_at
        for pk, retired_at in self.previous_keys:
            if start <= t < retired_at:
                return pk
            start = retired_at
        return self.active_public_key if t >= start else None

    def with_rotation(self, new_pk: bytes, at: int) -> "DidDocument":
        return replace(
            self,
            active_public_key=new_pk,
            previous_keys=self.previous_keys + ((self.active_public_key, at),),
            updated_at=at,
        )

    def with_revocation(self, at: int) -> "DidDocument":
        return replace(self, revoked=True, updated_at=at)

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "active_public_key": self.active_public_key.hex(),
            "previous_keys": [[pk.hex(), t] for pk, t in self.previous_keys],
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "revoked": self.revoked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DidDocument":
        return cls(
            id=Did.parse(d["id"]),
            active_public_key=bytes.fromhex(d["active_public_key"]),
            previous_keys=tuple((bytes.fromhex(pk), int(t)) for pk, t in d["previous_keys"]),
            created_at=d["created_at"],
            updated_at=d["updated_at"],
            revoked=d["revoked"],
        )


@dataclass(frozen=True)
class PeerDid:
    did: Did
    pairwise_keypair: KeyPair = field(repr=False)
    counterparty: Did

    @classmethod
    def generate(cls, counterparty: Did, rng: random.Random | None = None) -> "PeerDid":
        pair = keygen(rng=rng)
        return cls(did_from_key(pair.public_key, peer=True), pair, counterparty)

    def to_dict(self) -> dict:
        return {
            "did": str(self.did),
            "keypair": self.pairwise_keypair.to_dict(),
            "counterparty": str(self.counterparty),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PeerDid":
        return cls(Did.parse(d["did"]), KeyPair.from_dict(d["keypair"]), Did.parse(d["counterparty"]))


class LedgerView(Protocol):
    def did_document(self, did: str) -> DidDocument: ...


def resolve(view: LedgerView, did: Did | str) -> DidDocument:
    did = Did.parse(did)
    if did.is_peer:
        raise PeerDidError(f"{did} is a pairwise DID and never resolvable on the ledger")
    return view.did_document(str(did))


# -- wallet conventions ----------------------------------------------------
# records["did"]  primary DID string
# records["keys"] {did string: KeyPair dict} for every identity the wallet controls


def bind_identity(wallet: Wallet, did: Did, pair: KeyPair, primary: bool = True) -> None:
    keys = dict(wallet.get("keys", {}))
    keys[str(did)] = pair.to_dict()
    wallet.records["keys"] = keys
    if primary:
        wallet.records["did"] = str(did)
    if wallet.path is not None:
        wallet.save()


def primary_did(wallet: Wallet) -> Did:
    if "did" not in wallet:
        raise WalletError("wallet holds no identity")
    return Did.parse(wallet.get("did"))


def keypair_for(wallet: Wallet, did: Did | str) -> KeyPair:
    rec = wallet.get("keys", {}).get(str(did))
    if rec is None:
        raise WalletError(f"wallet holds no key for {did}")
    return KeyPair.from_dict(rec)


def create_identity(wallet: Wallet, rng: random.Random | None = None) -> tuple[Did, KeyPair]:
    pair = keygen(rng=rng)
    did = did_from_key(pair.public_key)
    bind_identity(wallet, did, pair)
    return did, pair


# -- transactions ----------------------------------------------------------


def register_did(pair: KeyPair, *, timestamp: int, rng: random.Random | None = None) -> Transaction:
    did = did_from_key(pair.public_key)
    return make_txn(
        TxnKind.DID_REG,
        {"did": str(did), "public_key": pair.public_key.hex()},
        str(did),
        pair.secret_key,
        timestamp=timestamp,
        rng=rng,
    )


def rotate_key(
    owner_wallet: Wallet,
    did: Did | str,
    new_pair: KeyPair,
    *,
    timestamp: int,
    view: LedgerView | None = None,
    rng: random.Random | None = None,
) -> Transaction:
    """Build a ROTATE transaction signed by the key the wallet currently holds.

    The wallet is not updated; call :func:`bind_identity` with ``new_pair``
    once the transaction commits.
    """
    did = Did.parse(did)
    current = keypair_for(owner_wallet, did)
    if view is not None and resolve(view, did).revoked:
        raise Rejected("revoked-did", str(did))
    return make_txn(
        TxnKind.ROTATE,
        {"did": str(did), "new_public_key": new_pair.public_key.hex()},
        str(did),
        current.secret_key,
        timestamp=timestamp,
        rng=rng,
    )


def revoke_did(
    authority_wallet: Wallet,
    did: Did | str,
    *,
    timestamp: int,
    rng: random.Random | None = None,
) -> Transaction:
    authority = primary_did(authority_wallet)
    pair = keypair_for(authority_wallet, authority)
    return make_txn(
        TxnKind.DID_REVOKE,
        {"did": str(Did.parse(did))},
        str(authority),
        pair.secret_key,
        timestamp=timestamp,
        rng=rng,
    )


def lookup(view: LedgerView, did: Did | str) -> DidDocument | None:
    try:
        return resolve(view, did)
    except (NotFoundError, PeerDidError):
        return None
