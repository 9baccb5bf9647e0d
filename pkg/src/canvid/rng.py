"""Seeded, counter-based pseudo-randomness.

Every draw is a pure function of (seed, counter): each call keys a fresh
Philox generator with that pair and then advances the counter, so identical
streams replay identically on any platform. Substreams are derived with a
splitmix64-style hash over integer or string keys, which keeps derivation
cheap and stable across runs.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"substream keys must be int or str, got {type(key).__name__}")


class RngStream:
    """A (seed, counter) random stream with reproducible substream derivation."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter & _MASK64], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        self.counter += 1
        return gen

    def substream(self, *keys) -> "RngStream":
        """Independent child stream keyed by ints/strings; derivation is stable."""
        h = self.seed
        for k in keys:
            h = _splitmix64(h ^ _key_to_int(k))
        return RngStream(h)

    def gaussian(self, shape, dtype=np.float32) -> np.ndarray:
        """I.i.d. standard normal draws."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        if len(shape) == 0:
            raise ValueError("gaussian: shape must be non-empty")
        return self._generator().standard_normal(shape, dtype=dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) (Fisher-Yates, via numpy)."""
        return self._generator().permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._generator().permutation(n)[:k]
