"""Deterministic seeded substreams for parallel replication.

Every replication (and every cell of an experiment grid) gets its own
independent generator derived from a master seed and a tuple of keys, so
results do not depend on execution order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("substream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Return a generator for the substream identified by ``keys``.

    String keys are hashed with CRC32; integer keys are used directly.
    """
    spawn_key = tuple(_key_to_int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=spawn_key))
