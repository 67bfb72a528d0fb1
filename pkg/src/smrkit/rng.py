"""Named, seeded random substreams.

A single run seed fans out into independent generators keyed by name, so
adding a consumer never shifts the draws seen by another.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

SEED_ENV = "SMRKIT_SEED"
DEFAULT_SEED = 0


def default_seed() -> int:
    value = os.environ.get(SEED_ENV)
    return int(value) if value else DEFAULT_SEED


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for ``(seed, *names)``; identical keys give identical streams."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    # tag each part with its type so ("a", 1) and ("a", "1") differ
    key = []
    for part in names:
        key.extend((1 if isinstance(part, (int, np.integer)) else 2, _token(part)))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))
