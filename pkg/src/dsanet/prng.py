"""Portable, fixed-algorithm pseudo-random generator.

All stochastic behavior in the package (synthetic data, parameter
initialization, epoch shuffling) goes through ``SplitMix64`` so that a
single 64-bit seed reproduces a run bit-for-bit, independent of numpy's
own generator versioning.

The raw integer stream is the standard splitmix64 sequence: the k-th
output is ``finalize(seed + (k+1) * GOLDEN)`` with the usual xor-shift /
multiply finalizer.  Integer outputs are portable by construction; float
transforms (uniform, Box-Muller normal) additionally depend on IEEE-754
libm, which is stable on any one machine.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = np.uint64(0xD6E8FEB86659FD93)
_INV_2_53 = float(2.0**-53)


def _finalize(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function on an uint64 array."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def child_seed(seed: int, tag: str | int) -> int:
    """Derive an independent stream seed from (seed, tag).

    Stable across runs and insensitive to how many values the parent
    stream has produced.
    """
    t = _fnv1a64(tag.encode("utf-8")) if isinstance(tag, str) else int(tag)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _CHILD_SALT) + np.uint64(
            t & 0xFFFFFFFFFFFFFFFF
        ) * _GOLDEN
    return int(_finalize(np.asarray([z], dtype=np.uint64))[0])


class SplitMix64:
    """Counter-based splitmix64 stream with vectorized draws."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def child(self, tag: str | int) -> "SplitMix64":
        return SplitMix64(child_seed(int(self._seed), tag))

    def next_raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 outputs."""
        ks = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            states = self._seed + ks * _GOLDEN
        return _finalize(states)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self.next_raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller pairs."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], no log(0)
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """n ints uniform in [low, high); modulo reduction (bias < 2**-53
        for desk-scale ranges, irrelevant next to determinism)."""
        if high <= low:
            raise ValueError("empty integer range")
        span = np.uint64(high - low)
        return (self.next_raw(n) % span).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(1, 0, i + 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm
