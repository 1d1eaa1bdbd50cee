"""Seeded, splittable randomness: xoshiro256** streams keyed by (seed, name).

Each named stream is seeded by running splitmix64 from a 64-bit key, the
reference seeding procedure for the xoshiro family, so any language with a
xoshiro256** implementation reproduces the same draws.
"""
from __future__ import annotations

import hashlib

import numpy as np
from randomgen import Xoshiro256

MASK64 = (1 << 64) - 1


def splitmix64(state: int, count: int) -> list[int]:
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def stream_key(seed: int, name: str = "") -> int:
    """64-bit key for the stream ``name`` under ``seed``."""
    digest = hashlib.sha256(name.encode()).digest()[:8]
    return (int(seed) & MASK64) ^ int.from_bytes(digest, "little")


def xoshiro_from_state(s) -> Xoshiro256:
    bg = Xoshiro256(0)
    st = bg.state
    st["s"] = np.array([int(x) & MASK64 for x in s], dtype=np.uint64)
    st["has_uint32"], st["uinteger"] = 0, 0
    bg.state = st
    return bg


class Stream:
    """A named xoshiro256** stream; ``split(name)`` derives an independent child."""

    def __init__(self, seed: int, name: str = ""):
        self.seed, self.name = int(seed), name
        state = splitmix64(stream_key(seed, name), 4)
        if not any(state):
            state[0] = 1
        self.bitgen = xoshiro_from_state(state)
        self.gen = np.random.Generator(self.bitgen)

    def split(self, name: str) -> "Stream":
        return Stream(self.seed, f"{self.name}/{name}" if self.name else name)

    def raw(self, n: int) -> list[int]:
        return [int(x) for x in self.bitgen.random_raw(n)]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size, replace=replace)
