"""Counter-based random source (SplitMix64 finalizer), vectorized over counters.

Draw ``i`` of stream ``s`` under seed ``k`` is::

    key = mix(k ^ (s * 0xD1B54A32D192ED03))
    out = mix(key + i * 0x9E3779B97F4A7C15)

with ``mix`` the SplitMix64 output function (shifts 30/27/31, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Everything is uint64 arithmetic
modulo 2**64, so any implementation reproduces the same bits.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
STREAM_MUL = np.uint64(0xD1B54A32D192ED03)
M1 = np.uint64(0xBF58476D1CE4E5B9)
M2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * M1
        z = (z ^ (z >> np.uint64(27))) * M2
    return z ^ (z >> np.uint64(31))


def mix_int(z: int) -> int:
    """Scalar reference implementation on Python ints."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Stream:
    """Independent stream of 64-bit draws addressed by counter."""

    def __init__(self, seed: int, stream: int):
        key = (seed ^ (stream * 0xD1B54A32D192ED03)) & MASK64
        self.key = np.uint64(mix_int(key))

    def bits(self, counters) -> np.ndarray:
        c = np.asarray(counters, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return mix(self.key + c * GAMMA)

    def integers(self, counters, n) -> np.ndarray:
        """Uniform integers in [0, n) via the high 32 bits (n < 2**32)."""
        hi = self.bits(counters) >> np.uint64(32)
        return ((hi * np.asarray(n, dtype=np.uint64)) >> np.uint64(32)).astype(np.int64)

    def bernoulli(self, counters, p: float) -> np.ndarray:
        """True with probability ``p``, resolved to a 24-bit integer threshold."""
        threshold = np.uint64(int(round(p * (1 << 24))))
        return (self.bits(counters) >> np.uint64(40)) < threshold
