"""Hierarchically keyed, counter-based random streams.

``RngStreams(seed).generator("noise", rep, k)`` always returns a fresh
Philox generator for that key. Distinct keys give independent streams and
no generator state is shared between consumers, so repetitions and
realizations can be produced in any order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    part = int(part)
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return part


class RngStreams:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def generator(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_word(p) for p in key))
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, shape, *key):
        return self.generator(*key).standard_normal(shape)

    def child(self, *key) -> "KeyedStreams":
        return KeyedStreams(self, key)

    def __repr__(self):
        return f"RngStreams(seed={self.seed})"


class KeyedStreams(RngStreams):
    """View of a parent stream family with a fixed key prefix."""

    def __init__(self, parent: RngStreams, prefix: tuple):
        super().__init__(parent.seed)
        self._prefix = tuple(getattr(parent, "_prefix", ())) + tuple(prefix)

    def generator(self, *key):
        return super().generator(*(self._prefix + key))


def as_streams(rng) -> RngStreams:
    if isinstance(rng, RngStreams):
        return rng
    if rng is None:
        return RngStreams(0)
    if isinstance(rng, (int, np.integer)):
        return RngStreams(int(rng))
    raise TypeError(f"expected RngStreams or integer seed, got {type(rng).__name__}")
