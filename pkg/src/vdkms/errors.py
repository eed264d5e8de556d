"""Exception types and the success/fail verdict shared across the package."""

from __future__ import annotations

from dataclasses import dataclass


class VdkmsError(Exception):
    """Base class for every error raised by this package."""


class CryptoError(VdkmsError):
    pass


class AuthenticationError(CryptoError):
    """AEAD tag mismatch: tampered ciphertext, wrong key or wrong AAD."""


class WalletError(VdkmsError):
    pass


class WalletVersionError(WalletError):
    pass


class ValidationError(VdkmsError, ValueError):
    pass


class NotFoundError(VdkmsError, LookupError):
    pass


class PeerDidError(VdkmsError):
    """A pairwise DID was used where only public ledger DIDs are allowed."""


class LedgerUnavailable(VdkmsError):
    """The ledger could not be reached. Safe to retry."""


class Rejected(VdkmsError):
    """An operation was refused; ``reason`` is a stable machine-readable code."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok

    @classmethod
    def success(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def fail(cls, reason: str) -> "Verdict":
        return cls(False, reason)

    def __repr__(self) -> str:
        return "Verdict(success)" if self.ok else f"Verdict(fail={self.reason!r})"
