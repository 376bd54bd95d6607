"""Seeded random streams with a draw counter."""

from __future__ import annotations

import numpy as np


class RngStream:
    """A reproducible source of random variates.

    Two streams built from the same seed and asked for the same sequence of
    draws return bit-identical samples. ``counter`` is the number of scalar
    variates handed out so far.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: int) -> "RngStream":
        """Independent stream derived from this seed and an integer tag."""
        ss = np.random.SeedSequence([self.seed, int(tag)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def random(self, shape=()) -> np.ndarray:
        out = self._gen.random(shape)
        self.counter += int(np.prod(shape))
        return out

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.counter += int(np.prod(shape))
        return out

    def normal(self, loc: float, scale: float, shape=()) -> np.ndarray:
        out = self._gen.normal(loc, scale, shape)
        self.counter += int(np.prod(shape))
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.counter += n
        return out

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        out = self._gen.integers(low, high, shape)
        self.counter += int(np.prod(shape))
        return out

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"
