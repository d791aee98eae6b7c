"""Seed plumbing: every random draw flows from one root seed through named streams."""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for a named stream, stable across platforms and runs.

    Labels (strings or ints) are hashed into the seed sequence, so distinct
    pipeline stages and steps draw from independent, reproducible streams.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            entropy.append(int(label) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))
