"""Deterministic stream derivation.

Every stochastic component draws from a generator derived from the master
seed plus a structural path (purpose tag, replicate id), so results are
reproducible bit for bit regardless of batching or worker count.
"""

from __future__ import annotations

import numpy as np

# purpose tags keep streams for different roles disjoint
DYNAMICS = 0
MARKERS = 1
ANALYSIS = 2


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def replicate_rngs(master_seed: int, replicate_ids, purpose: int = DYNAMICS):
    return [derive_rng(master_seed, purpose, int(r)) for r in replicate_ids]
