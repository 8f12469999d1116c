"""Deterministic seed derivation for independent RNG streams."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of ints/strings to a stable seed in [0, 2**63).

    Used to fan a single user-facing seed out into per-stage, per-epoch and
    per-image streams without correlation between them.
    """
    key = ":".join(str(p) for p in parts).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)
