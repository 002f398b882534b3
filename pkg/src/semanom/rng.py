"""Seeded random streams.

Every stochastic draw in the package (weight init, shuffling, masks, rotation
choice, negatives) comes from an :class:`Rng`. Streams are numpy ``PCG64``
generators keyed by a ``SeedSequence`` built from the root seed plus a path of
stream names, so ``Rng(0).child("init").child("conv1")`` is the same stream on
every run and does not depend on what other streams were drawn first.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, name: str | int) -> "Rng":
        """Independent named substream; does not advance this stream."""
        key = name if isinstance(name, int) else _name_key(str(name))
        return Rng(self.seed, self.path + (key,))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin passthroughs for the draws used across the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self.gen.random(size)
