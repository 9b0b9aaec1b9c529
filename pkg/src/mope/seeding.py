"""Named random sub-streams derived from a single run seed.

Every consumer of randomness asks for ``stream(seed, name, *extra)``; two runs that
differ in one factor therefore share every other stream.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "corpus": 0,
    "backbone-init": 1,
    "pretrain-order": 2,
    "icl-exemplars": 3,
    "kmeans": 4,
    "expert-init": 5,
    "expert-order": 6,
    "random-routing": 7,
    "lm-corpus": 8,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])
