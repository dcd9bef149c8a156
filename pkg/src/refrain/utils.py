"""Small shared helpers."""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(seed: int, *parts) -> int:
    """Derive a stable 63-bit child seed from a parent seed and salt parts.

    Hash-based so child streams are independent of how many other children
    were derived, which keeps multi-pass pipelines composable.
    """
    h = hashlib.sha256(repr((seed, parts)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
