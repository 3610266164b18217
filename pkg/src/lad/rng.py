"""Named counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream name, *counters)``. Streams never share state, so the order
in which scenes are processed (or which thread processes them) cannot change
any value.
"""

from __future__ import annotations

import zlib

import numpy as np

SCENES = "scenes"
NOISE = "noise"
INIT = "init"
ORDER = "order"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``name`` at the given counters."""
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    entropy = [int(seed), _name_key(name), *(int(c) for c in counters)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, name: str, *counters: int) -> int:
    """A 32-bit integer seed derived from a named stream."""
    return int(stream(seed, name, *counters).integers(0, 2**31 - 1))
