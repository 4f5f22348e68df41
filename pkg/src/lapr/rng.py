"""Deterministic random number generation (xoshiro256** seeded by splitmix64).

Every stochastic step in the package draws from :class:`SeededRng` so that
datasets, pair sampling, and trained checkpoints are bit-identical across
runs and platforms. The generator is implemented over Python integers,
masked to 64 bits, which keeps it exact everywhere.
"""

from __future__ import annotations

import hashlib
import math

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent 64-bit stream seed from (seed, label).

    Used to give each pipeline stage (init, pair sampling, proxy noise, ...)
    its own reproducible stream without draw-order coupling.
    """
    digest = hashlib.sha256(f"{seed & _MASK64}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """xoshiro256** generator with a splitmix64-expanded 64-bit seed.

    Single-owner: instances must not be shared across threads.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            out, state = _splitmix64(state)
            s.append(out)
        self._s = s
        self.seed = seed & _MASK64

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Standard Box-Muller transform; consumes exactly two draws."""
        # (u1 in (0, 1]) keeps the log finite.
        u1 = ((self.next_u64() >> 11) + 1) * (2.0 ** -53)
        u2 = self.random()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mu + sigma * z

    def gauss_vector(self, dim: int, sigma: float = 1.0) -> list[float]:
        return [self.gauss(0.0, sigma) for _ in range(dim)]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]
