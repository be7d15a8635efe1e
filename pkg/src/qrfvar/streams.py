"""Named, splittable random streams.

Every logical task draws from its own stream keyed by ``(seed, *keys)``, so
e.g. changing the inner sample count never perturbs the outer draws.
"""

import numpy as np

# stream tags
OUTER = 0
INNER = 1
EVAL = 2
TRUTH = 3
COVER = 4
FOREST = 5
SPLIT = 6
DATA = 7


def _seed_sequence(seed, keys):
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))


def stream(seed, *keys):
    """Generator for the sub-stream ``keys`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(_seed_sequence(seed, keys)))


def derive_seed(seed, *keys):
    """A 63-bit integer seed for the sub-stream ``keys`` under ``seed``."""
    state = _seed_sequence(seed, keys).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))
