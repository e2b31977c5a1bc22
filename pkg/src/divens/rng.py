"""Seeded, splittable counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)`` through
``numpy.random.SeedSequence``, so independent consumers (data shuffling,
OOD sampling, initialisation) never perturb each other and any stream can
be recreated from its key alone.
"""

from __future__ import annotations

import zlib

import numpy as np

PRNG_NAME = "numpy.random.Philox(4x64-10)+SeedSequence"


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part) & 0xFFFFFFFF


def make_rng(seed: int, *path) -> np.random.Generator:
    """Generator for the stream named by ``path`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
