"""Deterministic seed derivation for per-path random streams."""

import numpy as np


def derive_seed(seed, *keys):
    """Return a 64-bit integer seed derived from ``seed`` and integer ``keys``.

    The mapping goes through :class:`numpy.random.SeedSequence`, so nearby
    inputs give statistically independent streams.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def stream(seed, *keys):
    """Generator seeded by ``derive_seed(seed, *keys)``."""
    return make_rng(derive_seed(seed, *keys))
