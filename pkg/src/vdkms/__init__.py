"""Decentralized key management for vehicular networks.

Submodules: ``crypto`` and ``wallet`` (primitives and key storage),
``identity`` (DIDs), ``credentials`` (VIN credentials and selective
disclosure), ``ledger`` and ``consensus`` (the consortium chain),
``protocols`` (agent workflows) and ``simnet`` (discrete-event simulator).
"""

from .errors import LedgerUnavailable, Rejected, VdkmsError, Verdict
from .protocols import authorize, deploy, register_vehicle, verify_credentials

__version__ = "0.1.0"

__all__ = [
    "LedgerUnavailable",
    "Rejected",
    "VdkmsError",
    "Verdict",
    "authorize",
    "deploy",
    "register_vehicle",
    "verify_credentials",
]
