"""Counter-based random streams.

Every stream is a Philox generator whose 128-bit key packs the user seed and
a purpose code, and whose counter starts with the stream index in its most
significant word. Streams for different walks never overlap and a walk's
randomness does not depend on how many other walks were drawn before it.
"""

from enum import IntEnum

import numpy as np

_WORD = 64
_MAX_SEED = 2**_WORD


class Purpose(IntEnum):
    """Purpose codes separating the independent families of streams."""

    CONDUCTANCE = 1
    STREAM_TENSOR = 2
    WALK = 3
    TEST_FIELD = 4
    SELF_TEST = 5


def stream(seed: int, purpose: Purpose, index: int = 0) -> np.random.Generator:
    """Return the deterministic generator for ``(seed, purpose, index)``."""
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"Seed must be in [0, 2**64), got {seed}")
    if not 0 <= index < _MAX_SEED:
        raise ValueError(f"Stream index must be in [0, 2**64), got {index}")
    key = seed + (int(purpose) << _WORD)
    counter = index << (3 * _WORD)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
