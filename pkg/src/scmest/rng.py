"""Deterministic, splittable random streams.

Every random quantity in the package is drawn from a counter-based Philox
generator keyed by (seed, n, trial, purpose tag).  Streams are independent
of scheduling order, so parallel sweeps reproduce bit-identically, and the
same (seed, key) always yields the same draws on any platform.
"""

from __future__ import annotations

import numpy as np

TAGS = {
    "design": 1,
    "response": 2,
    "flip": 3,
    "mc": 4,
    "bootstrap": 5,
    "directions": 6,
    "theory": 7,
    "cone": 8,
    "sketch": 9,
}


def _entropy(seed):
    if isinstance(seed, (tuple, list)):
        return [int(s) & 0xFFFFFFFFFFFFFFFF for s in seed]
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def stream(seed, tag: str, *key) -> np.random.Generator:
    """Generator for (seed, tag, *key); same arguments, same stream."""
    sk = (TAGS[tag],) + tuple(int(k) for k in key)
    ss = np.random.SeedSequence(entropy=_entropy(seed), spawn_key=sk)
    return np.random.Generator(np.random.Philox(ss))
