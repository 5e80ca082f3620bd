"""Counter-based random streams keyed by (seed, index).

Each stream is a Philox generator seeded from ``SeedSequence([seed, index])``,
so sample ``index`` is reproducible in isolation and independent of how many
other samples were drawn before it or on which worker.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SEED = 0


def stream(seed: int, index: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def substream(seed: int, index: int, tag: int) -> np.random.Generator:
    """A further independent stream for auxiliary draws tied to one sample."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), int(tag)])))
