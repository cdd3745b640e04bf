"""Seeded, splittable random streams.

Backed by numpy's Philox counter-based bit generator, whose output is
specified independently of platform. Child streams are derived from the
parent seed plus a key path, so adding a consumer never perturbs the
streams of existing ones.
"""

from __future__ import annotations

import zlib
from typing import Tuple, Union

import numpy as np

Key = Union[int, str]


def _key_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFF


class Rng:
    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: Key) -> "Rng":
        """Independent child stream identified by ``keys``."""
        return Rng(self.seed, self.path + tuple(_key_int(k) for k in keys))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin wrappers so callers never touch the generator directly
    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)
