# services/rng.py

import numpy as np

# Stream domains keep generators of different estimators apart under one user seed.
SAMPLER = 0
PURIFICATION = 1
MESH = 2
SCAN = 3


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, *keys); independent of scheduling."""
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))
