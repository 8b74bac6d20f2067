"""Authenticated LSM-tree storage with a simulated trusted core over an untrusted host."""

from .core import (
    CoreConfig,
    RollbackDetected,
    SealTampered,
    TrustedCore,
    VerificationFailed,
    WalMismatch,
)
from .record import MAX_TS, Record, tombstone
from .store import UntrustedStore

__all__ = [
    "MAX_TS",
    "CoreConfig",
    "Record",
    "RollbackDetected",
    "SealTampered",
    "TrustedCore",
    "UntrustedStore",
    "VerificationFailed",
    "WalMismatch",
    "tombstone",
]
