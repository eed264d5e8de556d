"""Passphrase-encrypted wallet storage.

On-disk layout (all integers big-endian)::

    b"VDKW" | version:u8 | log2_n:u8 | r:u8 | p:u8
    | salt_len:u16 | salt | nonce_len:u16 | nonce | ct_len:u32 | ciphertext

The header up to and including the nonce is bound as AEAD associated data,
so scrypt parameters cannot be downgraded without failing authentication.
"""

from __future__ import annotations

import json
import os
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .crypto import AEAD_NONCE_SIZE, canonical, random_bytes
from .errors import AuthenticationError, WalletError, WalletVersionError

MAGIC = b"VDKW"
VERSION = 1
SALT_SIZE = 16
DEFAULT_LOG2_N = 14


@dataclass(frozen=True)
class WalletFile:
    version: int
    salt: bytes
    nonce: bytes
    ciphertext: bytes
    log2_n: int = DEFAULT_LOG2_N
    r: int = 8
    p: int = 1

    def header(self) -> bytes:
        return (
            MAGIC
            + struct.pack(">BBBB", self.version, self.log2_n, self.r, self.p)
            + struct.pack(">H", len(self.salt))
            + self.salt
            + struct.pack(">H", len(self.nonce))
            + self.nonce
        )

    def to_bytes(self) -> bytes:
        return self.header() + struct.pack(">I", len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "WalletFile":
        if data[:4] != MAGIC:
            raise WalletError("not a wallet file (bad magic)")
        try:
            version, log2_n, r, p = struct.unpack_from(">BBBB", data, 4)
            if version != VERSION:
                raise WalletVersionError(f"unsupported wallet version {version}")
            off = 8
            (n,) = struct.unpack_from(">H", data, off)
            salt = data[off + 2 : off + 2 + n]
            off += 2 + n
            (n,) = struct.unpack_from(">H", data, off)
            nonce = data[off + 2 : off + 2 + n]
            off += 2 + n
            (n,) = struct.unpack_from(">I", data, off)
            ciphertext = data[off + 4 : off + 4 + n]
        except struct.error as exc:
            raise WalletError("truncated wallet file") from exc
        if len(ciphertext) != n or len(salt) != SALT_SIZE or len(nonce) != AEAD_NONCE_SIZE:
            raise WalletError("truncated wallet file")
        return cls(version, salt, nonce, ciphertext, log2_n, r, p)


def derive_wallet_key(passphrase: str, salt: bytes, log2_n: int = DEFAULT_LOG2_N, r: int = 8, p: int = 1) -> bytes:
    if not passphrase:
        raise WalletError("passphrase must be nonempty")
    return Scrypt(salt=salt, length=32, n=1 << log2_n, r=r, p=p).derive(passphrase.encode("utf-8"))


def _seal_records(key: bytes, records: Any, salt: bytes, log2_n: int, rng) -> WalletFile:
    nonce = random_bytes(AEAD_NONCE_SIZE, rng)
    draft = WalletFile(VERSION, salt, nonce, b"", log2_n)
    ct = ChaCha20Poly1305(key).encrypt(nonce, canonical(records), draft.header())
    return WalletFile(VERSION, salt, nonce, ct, log2_n)


def _open_records(key: bytes, wf: WalletFile) -> Any:
    try:
        plain = ChaCha20Poly1305(key).decrypt(wf.nonce, wf.ciphertext, wf.header())
    except InvalidTag as exc:
        raise AuthenticationError("wallet authentication failed (wrong passphrase?)") from exc
    return json.loads(plain)


def wallet_store(
    passphrase: str,
    records: Any,
    *,
    rng: random.Random | None = None,
    log2_n: int = DEFAULT_LOG2_N,
) -> WalletFile:
    salt = random_bytes(SALT_SIZE, rng)
    key = derive_wallet_key(passphrase, salt, log2_n)
    return _seal_records(key, records, salt, log2_n, rng)


def wallet_load(passphrase: str, wf: WalletFile) -> Any:
    if wf.version != VERSION:
        raise WalletVersionError(f"unsupported wallet version {wf.version}")
    key = derive_wallet_key(passphrase, wf.salt, wf.log2_n, wf.r, wf.p)
    return _open_records(key, wf)


class Wallet:
    """Named records kept encrypted at rest.

    The scrypt key is derived once per wallet and cached; every save uses a
    fresh AEAD nonce. Single writer: one agent owns a wallet instance.
    """

    def __init__(
        self,
        passphrase: str,
        records: dict[str, Any] | None = None,
        *,
        path: str | os.PathLike | None = None,
        rng: random.Random | None = None,
        log2_n: int = DEFAULT_LOG2_N,
        salt: bytes | None = None,
    ):
        self.path = Path(path) if path is not None else None
        self.records: dict[str, Any] = dict(records or {})
        self._rng = rng
        self._log2_n = log2_n
        self._salt = salt if salt is not None else random_bytes(SALT_SIZE, rng)
        self._key = derive_wallet_key(passphrase, self._salt, log2_n)

    @classmethod
    def open(cls, path: str | os.PathLike, passphrase: str, *, rng=None) -> "Wallet":
        wf = WalletFile.from_bytes(Path(path).read_bytes())
        key = derive_wallet_key(passphrase, wf.salt, wf.log2_n, wf.r, wf.p)
        records = _open_records(key, wf)
        wallet = cls.__new__(cls)
        wallet.path = Path(path)
        wallet.records = records
        wallet._rng = rng
        wallet._log2_n = wf.log2_n
        wallet._salt = wf.salt
        wallet._key = key
        return wallet

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def get(self, name: str, default: Any = None) -> Any:
        return self.records.get(name, default)

    def put(self, name: str, record: Any) -> None:
        self.records[name] = record
        if self.path is not None:
            self.save()

    def to_file(self) -> WalletFile:
        return _seal_records(self._key, self.records, self._salt, self._log2_n, self._rng)

    def save(self, path: str | os.PathLike | None = None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise WalletError("wallet has no path")
        tmp = target.with_suffix(target.suffix + ".tmp")
        tmp.write_bytes(self.to_file().to_bytes())
        os.replace(tmp, target)
        self.path = target
