"""Deterministic RNG streams derived from a base seed plus string/int tags."""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, *tags: str | int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, tags); stable across platforms."""
    keys = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            keys.append(zlib.crc32(tag.encode("utf-8")))
        else:
            keys.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
