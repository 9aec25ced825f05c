"""Small shared helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def seed_for(seed: int, *tags: str) -> np.random.SeedSequence:
    """Named substream derivation: one master seed, independent streams per purpose."""
    key = tuple(int.from_bytes(hashlib.sha256(t.encode()).digest()[:4], "little")
                for t in tags)
    return np.random.SeedSequence(entropy=seed, spawn_key=key)


def derived_int(seed: int, *tags: str) -> int:
    """A plain integer seed derived from the master seed, for configs that store one."""
    return int(seed_for(seed, *tags).generate_state(1)[0])
