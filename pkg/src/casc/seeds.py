"""Fan a single experiment seed out into independent sub-seeds.

Stream ``i`` (1-based) receives the ``i``-th SplitMix64 output of the
top-level seed, shifted into the non-negative 63-bit range.
"""

from __future__ import annotations

from .noisegen.rng import SplitMix64

STREAMS = {"dataset": 1, "split": 2, "shuffle": 3, "init": 4, "noise": 5}


def sub_seed(seed: int, stream: str) -> int:
    gen = SplitMix64(seed)
    value = 0
    for _ in range(STREAMS[stream]):
        value = gen.next()
    return value >> 1
