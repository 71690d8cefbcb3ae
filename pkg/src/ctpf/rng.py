"""Deterministic, independently addressable random streams.

Every random draw in the package comes from a counter-based Philox stream
addressed by (master_seed, role, *indices). Streams are created on demand
from their address alone, so the set of values a computation consumes is a
pure function of the addresses it opens: particle propagation at
(step, particle) never shifts when resampling is toggled on or off, and
work can be distributed across threads without changing any result.
"""

from __future__ import annotations

import numpy as np

# Stream roles. Values are part of the on-disk reproducibility contract
# (a seed plus a role path fully determines a stream), so never renumber.
TIMES = 1        # observation-grid sampling, per sequence
PATH = 2         # ground-truth path simulation, per sequence
PROPAGATE = 3    # particle propagation, per (step, particle)
RESAMPLE = 4     # resampling draws, per step
PREDICT = 5      # prior extrapolation for prediction, per (step, particle)
POSTERIOR = 6    # posterior-only trajectory sampling, per (step, particle)
GENERIC = 7      # scratch streams for tests and self-checks


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by (master_seed, *path).

    The same address always yields the same stream; distinct addresses
    yield statistically independent streams.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))
