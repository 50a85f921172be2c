"""Seeded randomness helpers.

All randomness in the package flows through Philox, a counter-based
generator with a fixed, platform-independent algorithm, keyed through
``numpy.random.SeedSequence`` so that independent streams can be derived
from one master seed plus integer labels. The same seed therefore
reproduces the same draws on any machine.
"""

import numpy as np

# Stream labels. Each (seed, label, ...) tuple keys an independent stream.
STREAM_INIT = 1
STREAM_SPLIT = 2
STREAM_NOISE = 3
STREAM_SHUFFLE = 4
STREAM_NEG = 5
STREAM_MASK = 6
STREAM_GUMBEL = 7


def rng_from(*parts: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(parts)))


def derive_seed(*parts: int) -> int:
    """Collision-resistant integer sub-seed derived from the parts."""
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


def gumbel_pairs(seed: int, count: int) -> np.ndarray:
    """(count, 2) array of independent Gumbel(0, 1) draws.

    Uses -log(-log(U)) on uniforms from the stream (seed, STREAM_GUMBEL).
    """
    g = rng_from(seed, STREAM_GUMBEL)
    u = g.random((count, 2))
    # random() can in principle return exactly 0; keep log finite.
    np.clip(u, 1e-300, None, out=u)
    return -np.log(-np.log(u))
