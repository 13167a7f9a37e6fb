"""Hierarchical random streams.

One root seed is split into independent streams keyed by (purpose, *indices),
so every randomness source (gradient sampling, client selection, splitting,
quantization, ...) is reproducible in isolation and runs are a pure function
of (config, seed).
"""

from __future__ import annotations

import numpy as np

# Purpose codes for stream keys.  Keeping them numeric keeps SeedSequence
# hashing stable across versions of this package.
PROBLEM = 0
CLIENT_SAMPLING = 1
GRADIENT = 2
SPLITTING = 3
QUANTIZATION = 4
LDP_NOISE = 5
AUDIT = 6


def stream(root_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (root_seed, key...)."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
