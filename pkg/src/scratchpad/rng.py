"""Named, counter-based random streams.

A stream is identified by the run seed plus a path of names; two streams with
the same identity always produce the same draws, whatever else the program did
before. Nothing here touches numpy's global generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def child(self, *names) -> Rng:
        return Rng(self.seed, self.path + tuple(names))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            digest = hashlib.blake2b(
                repr((self.seed,) + self.path).encode(), digest_size=16
            ).digest()
            key = np.frombuffer(digest, dtype="<u8")
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
