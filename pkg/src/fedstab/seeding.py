"""Named, reproducible random streams derived from one master seed.

Every stochastic ingredient of a run draws from its own stream:

    derive(master, "data", repeat)         -> dataset sampling
    derive(master, "init", repeat)         -> initial model
    derive(master, "tape", repeat)         -> local-step sample indices
    derive(master, "oracle", ...)          -> population Monte Carlo sets
    derive(master, "replacement", i, j, r) -> the perturbed sample z'

A stream is ``SeedSequence(entropy=master, spawn_key=(STREAM_ID, *coords))``,
so streams never overlap and do not depend on how many other streams exist
or on the order in which they are requested.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 1,
    "init": 2,
    "tape": 3,
    "oracle": 4,
    "replacement": 5,
    "probe": 6,
    "means": 7,
    "test": 8,
    "constants": 9,
}


def derive(master: int, stream: str, *coords: int) -> np.random.SeedSequence:
    if stream not in STREAMS:
        raise KeyError(f"unknown seed stream {stream!r}")
    key = (STREAMS[stream],) + tuple(int(c) for c in coords)
    return np.random.SeedSequence(entropy=int(master), spawn_key=key)


def rng(master: int, stream: str, *coords: int) -> np.random.Generator:
    return np.random.default_rng(derive(master, stream, *coords))


def seed_int(master: int, stream: str, *coords: int) -> int:
    """A 63-bit integer seed for the stream, convenient for logging and CSV rows."""
    return int(derive(master, stream, *coords).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
