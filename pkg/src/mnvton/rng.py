"""Explicit seed threading.

Seeds are 64-bit integers mixed with SplitMix64; a child seed is derived
from a parent seed plus any number of integer or string keys, so every
consumer (init, data, noise, eval) gets an independent stream without
global state. Bulk draws come from numpy's PCG64 seeded with the derived
value.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & MASK64


def derive_seed(seed: int, *keys) -> int:
    s = int(seed) & MASK64
    for key in keys:
        _, s = splitmix64(s ^ _key_int(key))
        _, s = splitmix64(s)
    return s


def generator(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
