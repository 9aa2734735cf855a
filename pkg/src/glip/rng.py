"""Counter-based random streams.

Every stream is a Philox generator keyed by a ``SeedSequence`` whose spawn
key is the tuple of integer coordinates that identify the work item, e.g.
``(tau_index, replicate_index, purpose)``. The numbers a work item sees
therefore depend only on its coordinates and the master seed, never on the
order or grouping in which items are executed.
"""

from __future__ import annotations

import numpy as np

DATA = 0
POSTERIOR = 1
BOOTSTRAP = 2
TAIL = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("seed and key components must be non-negative")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an int seed, or None (seed 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0)
    return stream(int(rng))
