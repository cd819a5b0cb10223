"""Derived random streams.

Every random draw in the package comes from ``rng(seed, stage, *index)``,
i.e. ``SeedSequence([seed, STAGES[stage], *index])``. A single global seed
therefore fans out into independent, order-free streams: subject ``m`` of a
population always gets the same noise whether it is simulated first, last
or on another thread.
"""
from __future__ import annotations

import numpy as np

STAGES = {
    "field": 1,
    "translate": 2,
    "noise": 3,
    "design": 4,
    "run_effect": 5,
    "replicate": 6,
    "trace": 7,
    "sample": 8,
    "subset": 9,
}


def seed_sequence(seed: int, stage: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), STAGES[stage], *map(int, index)])


def rng(seed: int, stage: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, stage, *index))


def derive_int(seed: int, stage: str, *index: int) -> int:
    return int(seed_sequence(seed, stage, *index).generate_state(1, np.uint32)[0])
