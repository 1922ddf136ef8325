"""Seeded, counter-based random streams.

Streams are Philox generators keyed by ``(seed, *path)``; named children are
independent of each other and of how many draws the parent has made, which
keeps ablation arms aligned when only one of them consumes extra randomness.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *names) -> "Rng":
        """An independent stream identified by ``names`` below this one."""
        return Rng(self.seed, self.path + names)

    @property
    def counter(self) -> int:
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n_or_seq, size=None, p=None, replace=True):
        return self._gen.choice(n_or_seq, size=size, p=p, replace=replace)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._gen.random(size) < p

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
