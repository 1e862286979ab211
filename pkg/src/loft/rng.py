"""Seedable random number streams.

Every stochastic routine in this package draws from a numpy PCG64
generator built here, so a seed fully determines the output on any
machine.  Substreams are derived through SeedSequence spawning, which
keeps parallel draws independent without coupling them to execution
order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for an explicit nonnegative integer seed."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """`n` independent PCG64 generators derived from one seed."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]
