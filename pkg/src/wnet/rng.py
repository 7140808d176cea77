"""Seeded random streams.

Every stochastic component (initialisation, dropout, shuffling, fold
assignment) draws from numpy's PCG64 generator, which produces the same
sequence for a given seed on every platform. Independent streams are derived
from a master seed plus a path of integers so that, for example, fold 3 of a
cross-validation run never shares draws with fold 4.
"""

import numpy as np

INIT_STREAM = 0
TRAIN_STREAM = 1
FOLD_STREAM = 2
CV_STREAM = 3


def make_rng(seed, *path):
    """PCG64 generator for ``seed`` and an optional stream path."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *map(int, path)])))


def derive_seed(seed, *path):
    """A 64-bit seed derived deterministically from ``seed`` and ``path``."""
    ss = np.random.SeedSequence([int(seed), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
