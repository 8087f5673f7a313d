"""Deterministic named RNG streams derived from one master seed.

Every random draw in a run comes from a (master seed, stream, step) triple, so
disabling one randomness source never shifts the others, and resuming from a
checkpoint at step k replays exactly the draws an uninterrupted run would make.
"""

from __future__ import annotations

import numpy as np

STREAM_IDS = {
    "init": 0,
    "gumbel": 1,
    "augment": 2,
    "timestep": 3,
    "epsilon": 4,
}


def stream_seed(master_seed: int, stream: str, step: int = 0) -> int:
    """A stable integer seed for one stream at one step (wire-transmittable)."""
    ss = np.random.SeedSequence((master_seed, STREAM_IDS[stream], step))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream_rng(master_seed: int, stream: str, step: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, stream, step))
