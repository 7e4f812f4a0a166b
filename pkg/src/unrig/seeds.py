"""Deterministic RNG derivation.

Every random draw in the pipeline flows from a single root seed split
per stage by fixed string labels, so any artifact can be reproduced
from (config, seed) alone.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(root: int, *labels) -> np.random.SeedSequence:
    """Derive a child SeedSequence from a root seed and a label path.

    Labels may be strings or integers; strings are hashed with CRC32 so
    the derivation is stable across processes and platforms.
    """
    entropy = [int(root) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            entropy.append(int(label) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.SeedSequence(entropy)


def rng_for(root: int, *labels) -> np.random.Generator:
    """Generator seeded deterministically by (root, labels)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *labels)))
