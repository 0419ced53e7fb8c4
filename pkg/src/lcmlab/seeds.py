"""Deterministic seed derivation.

Every source of randomness in the package draws from one top-level seed,
expanded per purpose ("split", "shuffle", "init", "noise", ...) so that any
sub-experiment can be reproduced in isolation.
"""
from __future__ import annotations

import hashlib


def derive_seed(base: int, *tags) -> int:
    """Derive a child seed from ``base`` and a tuple of hashable tags.

    Stable across runs, platforms and Python versions (pure sha256 of the
    repr); returns a value in [0, 2**63).
    """
    material = repr((int(base),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)
