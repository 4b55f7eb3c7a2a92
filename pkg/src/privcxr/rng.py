"""Seeded random streams.

Every consumer draws from its own stream derived from the master seed by
``SeedSequence(seed, spawn_key=(stream_id, *index))``. Per-step streams add
the step number to the key, so the draw for step t never depends on how many
numbers earlier steps consumed or on thread scheduling.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "cohort": 1,
    "sampling": 2,
    "noise": 3,
    "augment": 4,
    "bootstrap": 5,
    "split": 6,
    "shuffle": 7,
}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = (STREAMS[name], *(int(i) for i in index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def derive_seed(seed: int, name: str, *index: int) -> int:
    """A plain integer seed for APIs that take one (e.g. model init)."""
    return int(stream(seed, name, *index).integers(0, 2**63 - 1))
