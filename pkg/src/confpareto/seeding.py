"""Deterministic seed derivation.

Every stochastic component gets its generator from ``(master seed, *path)``
so results never depend on execution order or worker count.
"""

from __future__ import annotations

import secrets

import numpy as np


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def int_seed_for(seed: int, *path: int) -> int:
    """A 32-bit integer seed for libraries that do not accept generators."""
    ss = np.random.SeedSequence([int(seed), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def fresh_seed() -> int:
    return secrets.randbits(63)


# stream identifiers, kept distinct so that adding a stream never shifts another
STREAM_DATA = 1
STREAM_SPLIT = 2
STREAM_FOREST = 3
STREAM_TEST = 4
STREAM_GMM = 5
STREAM_BETA = 6
STREAM_NOISE = 7
STREAM_LINEAR = 8
