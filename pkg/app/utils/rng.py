"""
Keyed Random Streams
====================

Counter-based generators addressed by (seed, draw index, stream id), so a
draw produces the same numbers whichever worker runs it and in whatever order.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Independent sub-streams of a single draw"""

    OBSERVED = 0
    UNOBSERVED = 1
    NOISE = 2
    FEATURES = 3


def stream_rng(seed: int, draw: int, stream: Stream) -> np.random.Generator:
    """
    Generator for one (seed, draw, stream) key

    Args:
        seed: Master seed of the run
        draw: Draw index
        stream: Sub-stream within the draw

    Returns:
        Philox-backed numpy Generator
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(draw), int(stream)))
    return np.random.Generator(np.random.Philox(sequence))
