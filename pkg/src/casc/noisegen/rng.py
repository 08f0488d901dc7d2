"""Portable 64-bit generator used for contour shuffling.

SplitMix64 expands the user seed into the state of an xorshift64*
generator; the shuffle is Fisher-Yates with ``j = next() % (i + 1)``.
Both are simple enough to reproduce bit-for-bit in any language, so a
removal set is identified by (seed, contour count) alone.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        state = SplitMix64(seed).next()
        self.state = state or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64


def shuffle(items: list, seed: int) -> list:
    """Seeded Fisher-Yates shuffle returning a new list."""
    out = list(items)
    rng = XorShift64Star(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next() % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out
