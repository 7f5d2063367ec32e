"""Deterministic RNG streams.

Every randomized stage pulls its generator from ``stream(root_seed, name)``
so that parallel and serial runs, and independent stages, agree bit-for-bit
for a fixed root seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Child generator for (seed, names...): stable across runs and platforms."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]))
