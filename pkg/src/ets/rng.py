"""Seed-derived random substreams.

All randomness in the toolkit flows from one master seed. Every operation that
needs randomness derives an independent generator from (seed, *key), so any
(image index, op index) pair reproduces the same stream regardless of worker
layout or call order.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for the given master seed and key path."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
