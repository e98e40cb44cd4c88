"""Seed-deterministic random streams.

Identical seeds produce bit-identical draw sequences. Named child streams
keep independent concerns (init, shuffling, augmentation) reproducible even
if one of them changes how much randomness it consumes.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """PCG64 stream derived from a 64-bit seed."""

    def __init__(self, seed: int, _entropy: tuple | None = None):
        self.seed = int(seed)
        self._entropy = _entropy if _entropy is not None else (self.seed,)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def child(self, tag: str) -> "Rng":
        """Independent stream identified by a stable string tag."""
        return Rng(self.seed, self._entropy + (zlib.crc32(tag.encode()),))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self.gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, shape=None):
        return self.gen.random(shape)
