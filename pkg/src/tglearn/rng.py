"""Counter-based random streams.

Every draw is a pure function of ``(seed, position)``: draw ``i`` of a stream
is ``splitmix64(key(seed) + i * golden)``.  Integer arithmetic only up to the
final float conversion, so uniforms are bit-identical on every platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z):
    z = np.array(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def _key(seed: int) -> np.uint64:
    return _splitmix(np.array([seed & _MASK64], dtype=np.uint64))[0]


@dataclass
class RngState:
    """Seed plus stream position; advancing the position consumes draws."""

    seed: int
    position: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        if self.position < 0:
            raise ValueError("stream position must be non-negative")

    def spawn(self, name: str) -> "RngState":
        """Independent named substream; does not advance this stream."""
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        return RngState(int.from_bytes(digest[:8], "little"))

    def copy(self) -> "RngState":
        return RngState(self.seed, self.position)

    def bits(self, n: int) -> np.ndarray:
        counters = np.arange(self.position, self.position + n, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            return _splitmix(counters * _GOLDEN + _key(self.seed))

    def random(self, shape=()) -> np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def bernoulli(self, shape, p: float) -> np.ndarray:
        """Boolean draws that are True with probability ``p``.

        Each 64-bit draw is split into two 32-bit uniforms, which halves the
        cost for the large masks dropout needs.
        """
        n = int(np.prod(shape, dtype=np.int64))
        halves = self.bits((n + 1) // 2).view(np.uint32)[:n]
        threshold = np.uint64(round(p * 2.0 ** 32))
        return (halves.astype(np.uint64) < threshold).reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u1 = self.random((n,))
        u2 = self.random((n,))
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return (std * z).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        draws = np.floor(self.random(shape) * high).astype(np.int64)
        return np.minimum(draws, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random((n,)), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct values from ``range(n)`` without replacement."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def categorical(self, cdf: np.ndarray, shape=()) -> np.ndarray:
        """Draws from a discrete distribution given its cumulative weights."""
        u = self.random(shape) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
