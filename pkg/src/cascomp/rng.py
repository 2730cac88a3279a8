"""Deterministic random streams.

All randomness in the package flows through `Stream`, a thin wrapper around
the Philox-4x64-10 counter-based bit generator. A stream is identified by a
128-bit key derived from a master seed plus string/integer tags via
splitmix64, so independent per-sample / per-purpose streams can be split off
without any shared mutable state. Every derived quantity (uniform doubles,
bounded integers, subsets, sphere points) is produced by the documented
transforms below, which makes generated data bit-stable across runs and
reproducible in any language with a Philox implementation.

Transforms on the raw 64-bit output stream:
  - double in [0,1):  (raw >> 11) * 2**-53
  - integer in [0,b): modulo rejection, accept raw < 2**64 - (2**64 % b)
  - k-subset of n:    partial Fisher-Yates over [0..n) using the above
"""

from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step; used for key derivation and id hashing."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _tag_value(tag) -> int:
    if isinstance(tag, str):
        h = 0
        for ch in tag.encode("utf-8"):
            h = splitmix64(h ^ ch)
        return h
    return int(tag) & _M64


def derive_key(master_seed: int, *tags) -> tuple[int, int]:
    """128-bit Philox key from a master seed and a tag path."""
    lo = splitmix64(master_seed & _M64)
    hi = splitmix64(lo)
    for tag in tags:
        t = _tag_value(tag)
        lo = splitmix64(lo ^ t)
        hi = splitmix64(hi ^ splitmix64(t))
    return lo, hi


class Stream:
    """A splittable deterministic stream of random draws."""

    def __init__(self, master_seed: int, *tags):
        self.key = derive_key(master_seed, *tags)
        self._master_seed = master_seed & _M64
        self._tags = tags
        self._bg = np.random.Philox(key=np.array(self.key, dtype=np.uint64))

    def spawn(self, *tags) -> "Stream":
        """Independent child stream; does not disturb this stream's state."""
        return Stream(self._master_seed, *self._tags, *tags)

    def raw64(self, n: int) -> np.ndarray:
        return self._bg.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0,1) with 53-bit resolution."""
        return (self.raw64(n) >> np.uint64(11)) * (2.0 ** -53)

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by modulo rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 64) // bound) * bound
        while True:
            r = int(self.raw64(1)[0])
            if r < threshold:
                return r % bound

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from [0, n), uniform, by partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.sample_indices(n, n)

    def unit_sphere_point(self) -> np.ndarray:
        """Area-uniform point on the unit sphere."""
        u = self.uniform(2)
        z = 2.0 * u[0] - 1.0
        phi = 2.0 * np.pi * u[1]
        s = np.sqrt(max(0.0, 1.0 - z * z))
        return np.array([s * np.cos(phi), s * np.sin(phi), z])

    def uniform_range(self, lo: float, hi: float, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        out = lo + (hi - lo) * u
        return float(out[0]) if n is None else out
