"""Deterministic hierarchical seeding.

Every random stream in a run derives from (root seed, stream tags) via
numpy's SeedSequence, so parallel and sequential execution, and re-runs
of the same config, draw identical numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def seed_sequence(*keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(k) for k in keys])


def generator(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))
