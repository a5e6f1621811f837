"""Counter-based random streams keyed by (seed, index, ...)."""

from __future__ import annotations

import os

import numpy as np

DEFAULT_SEED = 0
SEED_ENV = "TIMOTION_SEED"


def default_seed() -> int:
    value = os.environ.get(SEED_ENV)
    return int(value) if value not in (None, "") else DEFAULT_SEED


def stream(seed: int, *keys: int) -> np.random.Generator:
    """An independent Philox generator for ``(seed, *keys)``.

    Streams for different keys never depend on how many draws other streams
    made, so results are stable under reordering.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
