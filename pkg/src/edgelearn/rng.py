"""Seeded random streams.

Every consumer of randomness draws from a substream keyed by the master seed
plus a tuple of labels, e.g. ``substream(seed, "client", 3, "step", 17)``.
Keys are hashed into the entropy of a :class:`numpy.random.SeedSequence`, so
two substreams never share state and can be consumed in any order or on any
thread without changing results.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        # crc32 is stable across interpreter runs (unlike hash()).
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key type {type(key).__name__}")


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
