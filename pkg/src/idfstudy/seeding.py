"""Stable seed derivation so results never depend on execution order."""

import hashlib

import numpy as np


def derive_key(*parts) -> tuple[int, int]:
    """Hash arbitrary parts into a 128-bit key as two uint64 words."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little")


def derive_seed(*parts) -> int:
    """63-bit integer seed for ``np.random.default_rng``."""
    hi, _ = derive_key(*parts)
    return hi >> 1


def philox(*parts) -> np.random.Generator:
    """Counter-based generator keyed by ``parts``."""
    return np.random.Generator(np.random.Philox(key=np.array(derive_key(*parts), dtype=np.uint64)))
