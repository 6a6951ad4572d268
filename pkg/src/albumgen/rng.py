"""Seeded counter-based random streams.

Every stochastic operation in this package draws from a Philox generator
derived from (seed, *stream ids). Streams are independent and the same
(seed, ids) always reproduces the same bits, so training iterations,
pipeline pairs, and sampler runs are replayable in isolation.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by seed plus a stream-id path."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *stream: int) -> int:
    """A stable 63-bit sub-seed for handing to other components."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
