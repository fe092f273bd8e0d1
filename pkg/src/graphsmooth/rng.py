"""Seeded random streams.

All randomness in a run flows from a single 64-bit seed. Each consumer gets a
named substream so components stay independently reproducible: reseeding the
noise stream, say, never shifts weight initialization.
"""

import numpy as np

# Fixed substream ids; order is part of the reproducibility contract.
_STREAMS = {
    "init": 0,
    "shuffle": 1,
    "noise": 2,
    "dropout": 3,
    "data": 4,
    "attack": 5,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of a master seed."""
    try:
        stream_id = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown rng substream {name!r}") from None
    return np.random.default_rng(np.random.SeedSequence((int(seed), stream_id)))


def per_item_rng(seed: int, name: str, index: int) -> np.random.Generator:
    """Generator keyed by (seed, stream, item index).

    Used where work parallelizes over items (e.g. test images): each item's
    stream is independent of scheduling and batch splits.
    """
    stream_id = _STREAMS[name]
    return np.random.default_rng(np.random.SeedSequence((int(seed), stream_id, int(index))))
