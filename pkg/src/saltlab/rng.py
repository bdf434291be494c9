"""Named, forkable random streams.

A stream is identified by a root seed and a path of names.  Its draws depend
only on that identity, never on what other streams have drawn, so forked
streams can be consumed in any order (or in other processes) reproducibly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name) -> int:
    return int.from_bytes(hashlib.sha256(str(name).encode("utf-8")).digest()[:4], "little")


class RngStream:
    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_name_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @property
    def name(self) -> str:
        return "/".join(self.path) or "root"

    def fork(self, name) -> RngStream:
        """Child stream; independent of this stream's draw position."""
        return RngStream(self.seed, self.path + (str(name),))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r})"

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, sigma, shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, shape)


def as_stream(seed_or_stream, name: str | None = None) -> RngStream:
    stream = seed_or_stream if isinstance(seed_or_stream, RngStream) else RngStream(int(seed_or_stream))
    return stream.fork(name) if name else stream
