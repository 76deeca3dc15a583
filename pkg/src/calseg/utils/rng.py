"""
Named random streams derived from one root seed
"""

import zlib
from typing import Dict

import numpy as np

STREAMS = ("datagen", "init", "shuffle", "negative", "augment", "split")


class RngStreams:
    """
    Root seed -> independent generators per named stream.

    A stream's generator depends only on the root seed and the stream name, so
    re-running one stage reproduces its randomness without replaying the others.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._cache: Dict[str, np.random.Generator] = {}

    @staticmethod
    def stream_key(name: str) -> int:
        return zlib.crc32(name.encode("utf-8"))

    def seed_sequence(self, name: str, *extra: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, self.stream_key(name), *extra])

    def fresh(self, name: str, *extra: int) -> np.random.Generator:
        """New generator for (name, *extra); calling twice gives identical draws."""
        return np.random.default_rng(self.seed_sequence(name, *extra))

    def get(self, name: str) -> np.random.Generator:
        """Shared generator for a stream; successive calls continue the same sequence."""
        if name not in self._cache:
            self._cache[name] = self.fresh(name)
        return self._cache[name]
