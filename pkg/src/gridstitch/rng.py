"""Named random streams derived from a single seed.

Every source of randomness in a run (data generation, parameter init,
dropout, batch sampling, evaluation) draws from its own named stream so
that runs are reproducible and streams are independent of each other.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a Generator for sub-stream `names` of `seed`.

    The same (seed, names) pair always yields the same stream, on any
    platform, regardless of which other streams were drawn before.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
