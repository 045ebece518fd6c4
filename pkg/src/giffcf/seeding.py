"""Counter-based seed derivation so every component gets an independent stream."""

import zlib

import numpy as np


def derive_rng(seed: int, component: str, *index: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``(seed, component, *index)``.

    The component name is hashed with CRC32, which is stable across
    interpreters (unlike ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(component.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
