"""Deterministic seeded RNG: splitmix64 seed expansion feeding xoshiro256**.

Every stochastic step in the pipeline (weight init, shuffling, dropout
masks, synthetic data, object splits) draws from this generator so that a
single 64-bit seed reproduces a run bit-exactly across platforms.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64_next(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class SeededRng:
    """xoshiro256** stream, state seeded by four splitmix64 outputs."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            out, sm = _splitmix64_next(sm)
            s.append(out)
        self._s = s
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        # Box-Muller; the spare is cached so draws come in a fixed order.
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
        else:
            u1 = self.random()
            while u1 == 0.0:
                u1 = self.random()
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            z = r * math.cos(2.0 * math.pi * u2)
            self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * z

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for n << 2^64."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0,
                      dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.array([self.uniform(low, high) for _ in range(n)], dtype=dtype)
        return out.reshape(shape)

    def normal_array(self, shape, mu: float = 0.0, sigma: float = 1.0,
                     dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.array([self.normal(mu, sigma) for _ in range(n)], dtype=dtype)
        return out.reshape(shape)

    def spawn(self) -> "SeededRng":
        """Child generator with a seed drawn from this stream."""
        return SeededRng(self.next_u64())


# First ten raw u64 outputs for seed 42, frozen as a cross-platform golden
# stream (see tests/test_rng.py and docs/golden_stream_seed42.txt).
GOLDEN_SEED = 42
