"""Schemas, credential definitions, VIN credentials and selective disclosure.

Each attribute is committed as ``H(salt | len(name) | name | value)``; the
issuer signs the digest of the canonical ``{name: commitment}`` map. A
presentation reveals (value, salt) for requested attributes only and carries
bare commitments for the rest, so the verifier can rebuild the signed root
without learning hidden values.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .crypto import DIGEST_SIZE, canonical, canonical_digest, digest, new_nonce, random_bytes, sign, verify
from .errors import NotFoundError, Rejected, ValidationError, Verdict, WalletError
from .identity import Did, keypair_for, lookup, primary_did
from .replay import WINDOW_S, ReplayCache
from .txn import Transaction, TxnKind, make_txn
from .wallet import Wallet

SALT_SIZE = 16
VIN_ATTRIBUTE = "VIN"
VEHICLE_ATTRIBUTES = ("VIN", "make", "model", "owner")

_VIN_VALUES = {
    **{str(d): d for d in range(10)},
    **dict(zip("ABCDEFGH", range(1, 9))),
    **dict(zip("JKLMN", range(1, 6))),
    "P": 7,
    "R": 9,
    **dict(zip("STUVWXYZ", range(2, 10))),
}
_VIN_WEIGHTS = (8, 7, 6, 5, 4, 3, 2, 10, 0, 9, 8, 7, 6, 5, 4, 3, 2)


def vin_check_digit(vin: str) -> str:
    total = sum(_VIN_VALUES[c] * w for c, w in zip(vin, _VIN_WEIGHTS))
    rem = total % 11
    return "X" if rem == 10 else str(rem)


def is_valid_vin(vin: str) -> bool:
    if not isinstance(vin, str) or len(vin) != 17:
        return False
    if any(c not in _VIN_VALUES for c in vin):
        return False
    return vin[8] == vin_check_digit(vin)


def validate_attributes(attributes: Mapping[str, str]) -> str | None:
    """Registrar-side validity check; returns a rejection reason or None."""
    if VIN_ATTRIBUTE not in attributes:
        return "missing-vin"
    if not is_valid_vin(attributes[VIN_ATTRIBUTE]):
        return "invalid-vin"
    for name, value in attributes.items():
        if not isinstance(value, str) or not value:
            return "invalid-attribute"
    return None


def vin_tag(vin: str, key: bytes) -> str:
    """Keyed tag the ledger deduplicates on; the VIN itself never goes on chain."""
    return hmac.new(key, vin.encode("utf-8"), hashlib.sha256).hexdigest()


def commit_attribute(name: str, value: str, salt: bytes) -> bytes:
    n = name.encode("utf-8")
    return digest(salt + struct.pack(">I", len(n)) + n + value.encode("utf-8"))


def commitment_root(commitments: Mapping[str, bytes]) -> bytes:
    return canonical_digest({k: bytes(v) for k, v in commitments.items()})


# -- schema / definition ---------------------------------------------------


@dataclass(frozen=True)
class Schema:
    name: str
    version: str
    attribute_names: tuple[str, ...]
    issuer: str
    signature: bytes = field(default=b"", repr=False)

    def body(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "attribute_names": list(self.attribute_names),
            "issuer": self.issuer,
        }

    @property
    def ref(self) -> str:
        return canonical_digest(self.body()).hex()

    def verify_signature(self, pk: bytes) -> bool:
        return verify(pk, canonical(self.body()), self.signature)

    def to_dict(self) -> dict:
        return {**self.body(), "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            d["name"], d["version"], tuple(d["attribute_names"]), d["issuer"], bytes.fromhex(d["signature"])
        )


def check_attribute_names(attribute_names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(attribute_names)
    if not names:
        raise ValidationError("schema needs at least one attribute")
    if len(set(names)) != len(names):
        raise ValidationError("duplicate attribute names")
    if any(not isinstance(n, str) or not n for n in names):
        raise ValidationError("attribute names must be nonempty strings")
    return names


@dataclass(frozen=True)
class CredentialDefinition:
    schema_ref: str
    issuer: str
    issuer_public_key: bytes
    signature: bytes = field(default=b"", repr=False)

    def body(self) -> dict:
        return {
            "schema_ref": self.schema_ref,
            "issuer": self.issuer,
            "issuer_public_key": self.issuer_public_key.hex(),
        }

    @property
    def ref(self) -> str:
        return canonical_digest(self.body()).hex()

    def verify_signature(self) -> bool:
        return verify(self.issuer_public_key, canonical(self.body()), self.signature)

    def to_dict(self) -> dict:
        return {**self.body(), "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "CredentialDefinition":
        return cls(d["schema_ref"], d["issuer"], bytes.fromhex(d["issuer_public_key"]), bytes.fromhex(d["signature"]))


def _registrar_key(wallet: Wallet):
    did = primary_did(wallet)
    return did, keypair_for(wallet, did)


def schema_gen(
    registrar_wallet: Wallet,
    name: str,
    version: str,
    attribute_names: Iterable[str],
    *,
    timestamp: int,
    rng: random.Random | None = None,
) -> tuple[Schema, Transaction]:
    names = check_attribute_names(attribute_names)
    did, pair = _registrar_key(registrar_wallet)
    unsigned = Schema(name, version, names, str(did))
    schema = Schema(name, version, names, str(did), sign(pair.secret_key, canonical(unsigned.body())))
    txn = make_txn(TxnKind.SCHEMA, schema.to_dict(), str(did), pair.secret_key, timestamp=timestamp, rng=rng)
    return schema, txn


def def_gen(
    registrar_wallet: Wallet,
    schema: Schema,
    *,
    timestamp: int,
    rng: random.Random | None = None,
) -> tuple[CredentialDefinition, Transaction]:
    did, pair = _registrar_key(registrar_wallet)
    unsigned = CredentialDefinition(schema.ref, str(did), pair.public_key)
    cdef = CredentialDefinition(
        schema.ref, str(did), pair.public_key, sign(pair.secret_key, canonical(unsigned.body()))
    )
    txn = make_txn(TxnKind.CRED_DEF, cdef.to_dict(), str(did), pair.secret_key, timestamp=timestamp, rng=rng)
    return cdef, txn


# -- credentials -----------------------------------------------------------


@dataclass(frozen=True)
class ClaimSet:
    claims: dict[str, tuple[str, bytes]]

    @classmethod
    def from_attributes(cls, attributes: Mapping[str, str], rng: random.Random | None = None) -> "ClaimSet":
        return cls({name: (value, random_bytes(SALT_SIZE, rng)) for name, value in attributes.items()})

    def commitments(self) -> dict[str, bytes]:
        return {n: commit_attribute(n, v, s) for n, (v, s) in self.claims.items()}

    def to_dict(self) -> dict:
        return {n: [v, s.hex()] for n, (v, s) in self.claims.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClaimSet":
        return cls({n: (v, bytes.fromhex(s)) for n, (v, s) in d.items()})


@dataclass(frozen=True)
class CredentialCore:
    """The issuer-signed part of a credential, shared by credential and presentation."""

    cred_def_ref: str
    issuer: str
    subject: str
    subject_public_key: bytes
    commitment_root: bytes
    issued_at: int
    issuer_signature: bytes = field(default=b"", repr=False)

    def signing_bytes(self) -> bytes:
        return canonical(
            {
                "cred_def_ref": self.cred_def_ref,
                "issuer": self.issuer,
                "subject": self.subject,
                "subject_public_key": self.subject_public_key,
                "commitment_root": self.commitment_root,
                "issued_at": self.issued_at,
            }
        )

    def to_dict(self) -> dict:
        return {
            "cred_def_ref": self.cred_def_ref,
            "issuer": self.issuer,
            "subject": self.subject,
            "subject_public_key": self.subject_public_key.hex(),
            "commitment_root": self.commitment_root.hex(),
            "issued_at": self.issued_at,
            "issuer_signature": self.issuer_signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CredentialCore":
        return cls(
            d["cred_def_ref"],
            d["issuer"],
            d["subject"],
            bytes.fromhex(d["subject_public_key"]),
            bytes.fromhex(d["commitment_root"]),
            int(d["issued_at"]),
            bytes.fromhex(d["issuer_signature"]),
        )


@dataclass(frozen=True)
class VerifiableCredential:
    core: CredentialCore
    commitments: dict[str, bytes]
    claims: ClaimSet = field(repr=False)

    @property
    def cred_def_ref(self) -> str:
        return self.core.cred_def_ref

    @property
    def issuer(self) -> str:
        return self.core.issuer

    @property
    def subject(self) -> str:
        return self.core.subject

    @property
    def commitment_root(self) -> bytes:
        return self.core.commitment_root

    def registry_record(self, vin_tag_hex: str | None) -> dict:
        """CRED_REG payload: commitments and binding, never raw values."""
        return {
            "credential": self.core.to_dict(),
            "commitments": {n: c.hex() for n, c in self.commitments.items()},
            "vin_tag": vin_tag_hex,
        }

    def to_dict(self) -> dict:
        return {
            "core": self.core.to_dict(),
            "commitments": {n: c.hex() for n, c in self.commitments.items()},
            "claims": self.claims.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerifiableCredential":
        return cls(
            CredentialCore.from_dict(d["core"]),
            {n: bytes.fromhex(c) for n, c in d["commitments"].items()},
            ClaimSet.from_dict(d["claims"]),
        )


def issue_credential(
    registrar_wallet: Wallet,
    cred_def: CredentialDefinition,
    subject_did: Did | str,
    subject_pk: bytes,
    attributes: Mapping[str, str],
    *,
    view,
    timestamp: int,
    rng: random.Random | None = None,
) -> tuple[VerifiableCredential, Transaction]:
    """Sign claims for ``subject_did`` and build the CRED_REG transaction.

    Raises :class:`Rejected` with ``missing-vin``, ``invalid-vin``,
    ``duplicate-vin``, ``unknown-cred-def`` or ``attribute-mismatch``.
    """
    try:
        view.cred_def(cred_def.ref)
        schema = view.schema(cred_def.schema_ref)
    except NotFoundError:
        raise Rejected("unknown-cred-def", cred_def.ref) from None
    tag = None
    if VIN_ATTRIBUTE in schema.attribute_names:
        reason = validate_attributes(attributes)
        if reason:
            raise Rejected(reason)
        key = registrar_wallet.get("vin_tag_key")
        if key is None:
            raise WalletError("registrar wallet has no vin_tag_key")
        tag = vin_tag(attributes[VIN_ATTRIBUTE], bytes.fromhex(key))
        if view.vin_live(tag):
            raise Rejected("duplicate-vin")
    elif any(not isinstance(v, str) or not v for v in attributes.values()):
        raise Rejected("invalid-attribute")
    if set(attributes) != set(schema.attribute_names):
        raise Rejected("attribute-mismatch", f"expected {sorted(schema.attribute_names)}")

    did, pair = _registrar_key(registrar_wallet)
    claims = ClaimSet.from_attributes({n: attributes[n] for n in schema.attribute_names}, rng)
    commitments = claims.commitments()
    core = CredentialCore(
        cred_def.ref, str(did), str(Did.parse(subject_did)), bytes(subject_pk), commitment_root(commitments), timestamp
    )
    core = replace(core, issuer_signature=sign(pair.secret_key, core.signing_bytes()))
    vcred = VerifiableCredential(core, commitments, claims)
    txn = make_txn(
        TxnKind.CRED_REG, vcred.registry_record(tag), str(did), pair.secret_key, timestamp=timestamp, rng=rng
    )
    return vcred, txn


def revoke_credential(
    registrar_wallet: Wallet,
    root: bytes | str,
    *,
    timestamp: int,
    view=None,
    rng: random.Random | None = None,
) -> Transaction:
    root_hex = root.hex() if isinstance(root, bytes) else root
    did, pair = _registrar_key(registrar_wallet)
    if view is not None:
        entry = view.credential(root_hex)
        if entry["issuer"] != str(did):
            raise Rejected("not-issuer")
    return make_txn(
        TxnKind.CRED_REVOKE, {"commitment_root": root_hex}, str(did), pair.secret_key, timestamp=timestamp, rng=rng
    )


def store_credential(wallet: Wallet, vcred: VerifiableCredential) -> None:
    creds = dict(wallet.get("credentials", {}))
    creds[vcred.commitment_root.hex()] = vcred.to_dict()
    wallet.put("credentials", creds)


def wallet_credentials(wallet: Wallet) -> list[VerifiableCredential]:
    return [VerifiableCredential.from_dict(d) for d in wallet.get("credentials", {}).values()]


# -- presentation ----------------------------------------------------------


@dataclass(frozen=True)
class ProofRequest:
    requested_attributes: tuple[str, ...]
    nonce: bytes
    verifier: str
    issued_at: int

    @classmethod
    def create(
        cls,
        verifier: Did | str,
        requested_attributes: Iterable[str] = (VIN_ATTRIBUTE,),
        *,
        now: int,
        rng: random.Random | None = None,
    ) -> "ProofRequest":
        attrs = tuple(requested_attributes)
        if not attrs:
            raise ValidationError("proof request must name at least one attribute")
        return cls(attrs, new_nonce(rng), str(verifier), now)

    def to_dict(self) -> dict:
        return {
            "requested_attributes": list(self.requested_attributes),
            "nonce": self.nonce.hex(),
            "verifier": self.verifier,
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProofRequest":
        return cls(tuple(d["requested_attributes"]), bytes.fromhex(d["nonce"]), d["verifier"], int(d["issued_at"]))


@dataclass(frozen=True)
class Presentation:
    revealed: dict[str, tuple[str, bytes]]
    hidden_commitments: dict[str, bytes]
    credential: CredentialCore
    challenge_nonce: bytes
    holder_signature: bytes = field(default=b"", repr=False)

    def proof(self) -> dict:
        return {
            "revealed": {n: [v, s.hex()] for n, (v, s) in self.revealed.items()},
            "hidden_commitments": {n: c.hex() for n, c in self.hidden_commitments.items()},
            "credential": self.credential.to_dict(),
        }

    def signing_bytes(self) -> bytes:
        return canonical({"proof": self.proof(), "challenge_nonce": self.challenge_nonce})

    def to_dict(self) -> dict:
        return {
            "proof": self.proof(),
            "challenge_nonce": self.challenge_nonce.hex(),
            "holder_signature": self.holder_signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Presentation":
        p = d["proof"]
        return cls(
            {n: (v, bytes.fromhex(s)) for n, (v, s) in p["revealed"].items()},
            {n: bytes.fromhex(c) for n, c in p["hidden_commitments"].items()},
            CredentialCore.from_dict(p["credential"]),
            bytes.fromhex(d["challenge_nonce"]),
            bytes.fromhex(d["holder_signature"]),
        )


def proof_gen(holder_wallet: Wallet, vcred: VerifiableCredential, request: ProofRequest) -> Presentation:
    unknown = [a for a in request.requested_attributes if a not in vcred.claims.claims]
    if unknown:
        raise Rejected("unknown-attribute", ", ".join(unknown))
    pair = keypair_for(holder_wallet, vcred.subject)
    wanted = set(request.requested_attributes)
    revealed = {n: vs for n, vs in vcred.claims.claims.items() if n in wanted}
    hidden = {n: c for n, c in vcred.commitments.items() if n not in wanted}
    unsigned = Presentation(revealed, hidden, vcred.core, request.nonce)
    return Presentation(revealed, hidden, vcred.core, request.nonce, sign(pair.secret_key, unsigned.signing_bytes()))


def verify_presentation(
    view,
    presentation: Presentation,
    request: ProofRequest,
    *,
    now: int,
    replay_cache: ReplayCache | None = None,
) -> Verdict:
    """Check every conjunct of credential verification; first failure wins.

    On success the challenge nonce is recorded in ``replay_cache`` (when
    given) so the same presentation cannot be accepted twice.
    """
    p = presentation
    core = p.credential
    if p.challenge_nonce != request.nonce:
        return Verdict.fail("nonce-mismatch")
    if abs(now - request.issued_at) > WINDOW_S:
        return Verdict.fail("stale-challenge")
    replay_key = (request.verifier, request.nonce)
    if replay_cache is not None and replay_key in replay_cache:
        return Verdict.fail("replay")
    if any(a not in p.revealed for a in request.requested_attributes):
        return Verdict.fail("attribute-not-revealed")

    try:
        cdef = view.cred_def(core.cred_def_ref)
        schema = view.schema(cdef.schema_ref)
    except NotFoundError:
        return Verdict.fail("unknown-cred-def")
    if set(p.revealed) & set(p.hidden_commitments) or set(p.revealed) | set(p.hidden_commitments) != set(
        schema.attribute_names
    ):
        return Verdict.fail("malformed-proof")
    commitments = dict(p.hidden_commitments)
    for name, (value, salt) in p.revealed.items():
        if len(salt) != SALT_SIZE:
            return Verdict.fail("commitment-mismatch")
        commitments[name] = commit_attribute(name, value, salt)
    if any(len(c) != DIGEST_SIZE for c in commitments.values()) or commitment_root(commitments) != core.commitment_root:
        return Verdict.fail("commitment-mismatch")

    if core.issuer != cdef.issuer or not view.is_registrar(core.issuer):
        return Verdict.fail("untrusted-issuer")
    issuer_doc = lookup(view, core.issuer)
    if issuer_doc is None:
        return Verdict.fail("untrusted-issuer")
    if issuer_doc.revoked:
        return Verdict.fail("revoked-issuer")
    issuer_pk = issuer_doc.key_at(core.issued_at)
    if issuer_pk is None or not verify(issuer_pk, core.signing_bytes(), core.issuer_signature):
        return Verdict.fail("issuer-signature")

    subject_doc = lookup(view, core.subject)
    if subject_doc is None:
        return Verdict.fail("unknown-subject")
    if subject_doc.revoked:
        return Verdict.fail("revoked-subject")
    if not verify(subject_doc.active_public_key, p.signing_bytes(), p.holder_signature):
        return Verdict.fail("holder-signature")

    try:
        entry = view.credential(core.commitment_root.hex())
    except NotFoundError:
        return Verdict.fail("unknown-credential")
    if entry["subject"] != core.subject or entry["issuer"] != core.issuer:
        return Verdict.fail("unknown-credential")
    if entry["revoked"]:
        return Verdict.fail("revoked-credential")

    if replay_cache is not None and replay_cache.accept(replay_key, request.issued_at, now):
        return Verdict.fail("replay")
    return Verdict.success()
