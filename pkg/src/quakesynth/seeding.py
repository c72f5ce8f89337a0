"""Deterministic seed derivation.

Every random stream in the pipeline is keyed by (master_seed, stage, index)
through a cryptographic hash, so records can be generated in any order (or
in parallel) and stages can be rerun independently without shifting the
randomness of the others.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 64-bit seed."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
