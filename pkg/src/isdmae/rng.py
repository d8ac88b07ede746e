"""Portable seeded PRNG: splitmix64-seeded xoshiro256**.

Sub-streams are derived by hashing ``(seed, tag, tag, ...)`` so that every
sample, epoch and branch owns an independent, index-addressable stream.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, *tags: int | str) -> int:
    """Hash a base seed and a path of tags into a new 64-bit seed."""
    _, h = splitmix64(seed & MASK64)
    for tag in tags:
        t = _fnv1a64(tag.encode()) if isinstance(tag, str) else int(tag) & MASK64
        _, h = splitmix64(h ^ t)
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator with a few sampling helpers."""

    def __init__(self, seed: int):
        s = seed & MASK64
        state = []
        for _ in range(4):
            s, out = splitmix64(s)
            state.append(out)
        self.s = state

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Xoshiro256":
        obj = cls.__new__(cls)
        obj.s = [int(v) & MASK64 for v in state]
        return obj

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randbelow needs n > 0")
        bits = max(1, (n - 1).bit_length())
        while True:
            v = self.next_u64() >> (64 - bits)
            if v < n:
                return v

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct values from range(n), uniformly, via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list[int]:
        return self.sample(n, n)

    def numpy(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream, for bulk draws."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))


def stream(seed: int, *tags: int | str) -> Xoshiro256:
    return Xoshiro256(derive_seed(seed, *tags))
