"""Named deterministic random streams derived from a single master seed.

Every source of randomness in the package (tree layout, parameter init,
document shuffling, histogram splits, dropout masks) draws from its own
named stream so that, e.g., changing the number of training epochs never
shifts the tree layout.
"""

import zlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for `name` that depends only on (seed, name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
