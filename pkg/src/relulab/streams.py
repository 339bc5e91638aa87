"""Named, reproducible random streams.

All randomness flows through numpy's Philox counter-based generator (a
published, seedable algorithm), keyed by a user seed plus a fixed stream
name, so initialization, mini-batch shuffling, dropout masks and step-size
draws are independent and individually replayable.
"""

from __future__ import annotations

import numpy as np

# fixed registry: the spawn key of each stream is its position here
_STREAMS = ("init", "shuffle", "gamma", "dropout", "directions", "data")


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for (seed, stream name, optional sub-index).

    ``index`` splits a stream into independent children (one per Monte
    Carlo draw, for instance) without correlating them.
    """
    if name not in _STREAMS:
        raise ValueError(f"unknown stream {name!r}; expected one of {_STREAMS}")
    key = (_STREAMS.index(name), index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
