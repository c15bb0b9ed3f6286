"""Portable pseudo-random stream used wherever output must be reproducible
outside Python (split manifests).

SplitMix64 (Steele, Lea & Flood 2014) is a 64-bit generator that is trivial to
port bit-exactly to any language with wrapping unsigned 64-bit arithmetic.
Bounded integers are drawn by rejection sampling so the shuffle is unbiased.
"""

from __future__ import annotations

from typing import MutableSequence, TypeVar

T = TypeVar("T")

ALGORITHM_ID = "splitmix64/fisher-yates-rejection/v1"

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)``."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        # largest multiple of bound that fits in 2**64
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates, walking from the end of the sequence."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
