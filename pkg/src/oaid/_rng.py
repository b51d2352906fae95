"""Deterministic per-sample random streams."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=16).digest(), "little")


def derive_rng(*parts) -> np.random.Generator:
    """Generator keyed on e.g. ``(master_seed, source_id, split, index, epoch)``.

    Independent of call order, so samples can be produced in any order or in
    parallel and still reproduce bit-exactly.
    """
    return np.random.default_rng(derive_seed(*parts))


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(seed)
