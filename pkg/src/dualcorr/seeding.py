"""Deterministic seed derivation: one root seed, stable per-subsystem children."""

import hashlib


def derive_seed(root: int, label: str) -> int:
    """A 32-bit child seed from (root, label), stable across runs and platforms."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
