"""Stable seed derivation: every random stream is keyed by (root, purpose, index)."""

import hashlib

import numpy as np


def derive_seed(root: int, purpose: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(root)}/{purpose}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(root, purpose, index=0):
    return np.random.default_rng(derive_seed(root, purpose, index))
