"""Named random streams derived from one master seed.

Each consumer (dataset, init, episodes, mixing, ...) draws from its own
stream, so enabling or disabling one consumer never shifts another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 1,
    "fraction": 2,
    "init": 3,
    "episodes": 4,
    "mixing": 5,
    "val": 6,
    "test": 7,
    "pretrain": 8,
    "head": 9,
}


def seed_sequence(master_seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(STREAMS[name],))


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, name))


def derived_seed(master_seed: int, name: str) -> int:
    """A plain integer seed for APIs that take one."""
    return int(seed_sequence(master_seed, name).generate_state(1, dtype=np.uint64)[0] >> 1)
