"""Splittable deterministic random streams.

A stream is identified by a master seed plus a lineage of integer split keys.
The generator behind it is numpy's counter-based Philox4x64-10 keyed through
``SeedSequence(seed, spawn_key=lineage)``, so a child's output depends only on
``(seed, lineage)`` and never on how much of the parent or its siblings has
been consumed. Golden sequences in the test suite pin this mapping.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError(f"split keys must be non-negative, got {key}")
    return key


class RngStream:
    """Single-owner random stream. Share work by splitting, never by sharing."""

    def __init__(self, seed: int, lineage=()):
        self.seed = int(seed)
        if self.seed < 0:
            raise ValueError("master seed must be non-negative")
        self.lineage = tuple(_key(k) for k in lineage)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.lineage)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, key) -> "RngStream":
        """Child stream at ``lineage + [key]``; string keys are CRC32-hashed."""
        return RngStream(self.seed, self.lineage + (_key(key),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly at random, in draw order."""
        return self.generator.permutation(n)[:k]

    def __repr__(self):
        return f"RngStream(seed={self.seed}, lineage={list(self.lineage)})"


def rng_split(stream: RngStream, key) -> RngStream:
    return stream.split(key)
