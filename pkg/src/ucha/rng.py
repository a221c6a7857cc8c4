"""Seeded random streams.

Every experiment owns one master seed. Named substreams ("fading",
"compression", "policy", ...) are derived from it through numpy's
``SeedSequence`` spawn keys, so drawing from one substream never shifts
another.
"""
from __future__ import annotations

import zlib

import numpy as np


class InvalidRangeError(ValueError):
    pass


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RandomStream:
    """A single-owner PCG64 stream identified by (seed, path of names)."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_name_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def substream(self, name: str) -> "RandomStream":
        return RandomStream(self.seed, self.path + (name,))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    def uniform(self, lo: float, hi: float, size=None):
        if not lo < hi:
            raise InvalidRangeError(f"uniform range requires lo < hi, got [{lo}, {hi})")
        return self.generator.uniform(lo, hi, size)

    def std_normal(self, size=None):
        return self.generator.standard_normal(size)

    def complex_normal(self, size=None):
        """CN(0, 1): real and imaginary parts each N(0, 1/2)."""
        re = self.generator.standard_normal(size)
        im = self.generator.standard_normal(size)
        return (re + 1j * im) * np.sqrt(0.5)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self.generator.choice(n, p=p))

    def dirichlet(self, alpha):
        return self.generator.dirichlet(alpha)
