"""Counter-based random streams.

Every random draw in the simulator comes from a Philox generator whose key
is a 64-bit seed and whose starting counter encodes *what* the draw is for
(round, purpose, worker). No generator is ever carried between rounds, so
results do not depend on the order in which workers or rounds are visited.
"""
from __future__ import annotations

import enum

import numpy as np

_MASK64 = (1 << 64) - 1


class Stream(enum.IntEnum):
    GRADIENT = 1
    COMPRESS = 2
    MINIBATCH = 3
    TRIAL = 4
    INIT = 5
    PROBE = 6


def generator(seed: int, round: int, stream: Stream, worker: int = 0) -> np.random.Generator:
    # Draws advance counter word 0; the identifying fields live in the upper
    # words so that distinct (round, stream, worker) never overlap.
    counter = [0, worker & _MASK64, int(stream), round & _MASK64]
    return np.random.Generator(np.random.Philox(key=seed & _MASK64, counter=counter))


def mix(*parts: int) -> int:
    """Combine several integers into one 64-bit seed (order-sensitive)."""
    state = np.random.SeedSequence([p & _MASK64 for p in parts]).generate_state(1, np.uint64)
    return int(state[0])
