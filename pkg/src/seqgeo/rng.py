"""Seeded random streams.

Every stochastic component of the package draws from a generator built
here. The algorithm is pinned to Philox (counter-based) so that a seed
produces the same stream on every platform and numpy version that ships
it; do not swap in the platform default generator.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Return the package-standard generator for `seed`."""
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split `rng` into `n` independent child streams (deterministic)."""
    return [np.random.Generator(np.random.Philox(key=rng.integers(0, 2**63, dtype=np.uint64)))
            for _ in range(n)]
