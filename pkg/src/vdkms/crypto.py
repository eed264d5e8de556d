"""Signing, hashing, nonces, key agreement and authenticated encryption.

Signatures are Ed25519. ``seal``/``open_sealed`` derive a static-static
X25519 shared secret from the same Ed25519 key pairs (birational map from
the Edwards to the Montgomery form), expand it with HKDF-SHA256 and encrypt
with ChaCha20-Poly1305.

Every function that needs randomness accepts an optional ``rng``
(``random.Random``); with ``rng=None`` the OS CSPRNG is used. Simulations
pass a seeded generator so runs are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Any

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationError, CryptoError

PUBLIC_KEY_SIZE = 32
SECRET_KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 16
DIGEST_SIZE = 32
AEAD_NONCE_SIZE = 12

_P = 2**255 - 19


def random_bytes(n: int, rng: random.Random | None = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.getrandbits(8 * n).to_bytes(n, "little") if n else b""


def new_nonce(rng: random.Random | None = None) -> bytes:
    return random_bytes(NONCE_SIZE, rng)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if hasattr(value, "to_dict"):
        return _jsonable(value.to_dict())
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float):
        raise TypeError("floats are not allowed in canonical form")
    return value


def canonical(value: Any) -> bytes:
    """Key-sorted, whitespace-free UTF-8 JSON; bytes become lowercase hex."""
    return json.dumps(
        _jsonable(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def canonical_digest(value: Any) -> bytes:
    return digest(canonical(value))


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"

    def to_dict(self) -> dict:
        return {"public_key": self.public_key.hex(), "secret_key": self.secret_key.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPair":
        pair = keygen(bytes.fromhex(d["secret_key"]))
        if pair.public_key.hex() != d["public_key"]:
            raise CryptoError("stored public key does not match secret key")
        return pair


@lru_cache(maxsize=4096)
def _private_key(sk: bytes) -> Ed25519PrivateKey:
    if len(sk) != SECRET_KEY_SIZE:
        raise CryptoError(f"secret key must be {SECRET_KEY_SIZE} bytes, got {len(sk)}")
    return Ed25519PrivateKey.from_private_bytes(sk)


@lru_cache(maxsize=4096)
def _public_key(pk: bytes) -> Ed25519PublicKey:
    if len(pk) != PUBLIC_KEY_SIZE:
        raise CryptoError(f"public key must be {PUBLIC_KEY_SIZE} bytes, got {len(pk)}")
    try:
        return Ed25519PublicKey.from_public_bytes(pk)
    except ValueError as exc:
        raise CryptoError(str(exc)) from exc


def keygen(seed: bytes | None = None, rng: random.Random | None = None) -> KeyPair:
    if seed is None:
        seed = random_bytes(SECRET_KEY_SIZE, rng)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SECRET_KEY_SIZE:
        raise CryptoError(f"seed must be {SECRET_KEY_SIZE} bytes")
    seed = bytes(seed)
    pk = _private_key(seed).public_key().public_bytes_raw()
    return KeyPair(public_key=pk, secret_key=seed)


def sign(sk: bytes, msg: bytes) -> bytes:
    return _private_key(bytes(sk)).sign(msg)


@lru_cache(maxsize=1 << 16)
def _verify_cached(pk: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        _public_key(pk).verify(sig, msg)
    except InvalidSignature:
        return False
    return True


def verify(pk: bytes, msg: bytes, sig: bytes) -> bool:
    """Return True iff ``sig`` is a valid signature of ``msg`` under ``pk``.

    Never raises for well-typed input; malformed keys or signatures verify
    as False. Results are memoized: verification is a pure function and the
    simulator re-checks the same broadcast message at every replica.
    """
    if len(pk) != PUBLIC_KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        return _verify_cached(bytes(pk), bytes(msg), bytes(sig))
    except CryptoError:
        return False


# -- key agreement ---------------------------------------------------------


def _x25519_public(ed_pk: bytes) -> X25519PublicKey:
    y = int.from_bytes(ed_pk, "little") & ((1 << 255) - 1)
    if y >= _P or y == 1:
        raise CryptoError("public key not usable for key agreement")
    u = (1 + y) * pow(1 - y, _P - 2, _P) % _P
    return X25519PublicKey.from_public_bytes(u.to_bytes(32, "little"))


@lru_cache(maxsize=4096)
def _x25519_private(ed_sk: bytes) -> X25519PrivateKey:
    h = hashlib.sha512(ed_sk).digest()[:32]
    return X25519PrivateKey.from_private_bytes(h)


@lru_cache(maxsize=4096)
def _channel_key(own_sk: bytes, peer_pk: bytes, sender_pk: bytes, recipient_pk: bytes) -> bytes:
    try:
        shared = _x25519_private(own_sk).exchange(_x25519_public(peer_pk))
    except ValueError as exc:
        raise CryptoError(str(exc)) from exc
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"vdkms/seal/v1" + sender_pk + recipient_pk,
    ).derive(shared)


def seal(
    sender_sk: bytes,
    recipient_pk: bytes,
    plaintext: bytes,
    aad: bytes = b"",
    rng: random.Random | None = None,
) -> bytes:
    sender_pk = keygen(sender_sk).public_key
    key = _channel_key(bytes(sender_sk), bytes(recipient_pk), sender_pk, bytes(recipient_pk))
    nonce = random_bytes(AEAD_NONCE_SIZE, rng)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def open_sealed(recipient_sk: bytes, sender_pk: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    recipient_pk = keygen(recipient_sk).public_key
    key = _channel_key(bytes(recipient_sk), bytes(sender_pk), bytes(sender_pk), recipient_pk)
    if len(ciphertext) < AEAD_NONCE_SIZE + 16:
        raise AuthenticationError("ciphertext too short")
    nonce, body = ciphertext[:AEAD_NONCE_SIZE], ciphertext[AEAD_NONCE_SIZE:]
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, body, aad)
    except InvalidTag as exc:
        raise AuthenticationError("ciphertext failed authentication") from exc
