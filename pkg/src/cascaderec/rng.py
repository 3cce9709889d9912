"""Portable seeded randomness.

Every random draw in the package flows through a Philox4x64-10 counter-based
bit generator so that a given ``--seed`` reproduces bit-identical artifacts
across runs and platforms. Subsystems get disjoint streams by keying the
128-bit Philox key as::

    key = (stream << 96) | (substream << 64) | (seed mod 2**64)

which keeps the streams independent without any shared mutable state.
"""

import numpy as np
from numpy.random import Generator, Philox

_MASK64 = (1 << 64) - 1

# stream ids, one per subsystem
SYNTH = 0x01
INIT = 0x02
SHUFFLE = 0x03
KMEANS = 0x04
FUSE = 0x05
SPLIT = 0x06
GRADCHECK = 0x07
EVAL = 0x08


def make_rng(seed: int, stream: int, substream: int = 0) -> Generator:
    """Independent generator for (seed, stream, substream)."""
    key = (int(stream) << 96) | ((int(substream) & _MASK64) << 64) | (int(seed) & _MASK64)
    return Generator(Philox(key=key))


def unit_vector(seed: int, substream: int, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector, e.g. for items with no modalities."""
    g = make_rng(seed, FUSE, substream)
    v = g.standard_normal(dim)
    n = np.linalg.norm(v)
    if n == 0.0:  # astronomically unlikely, but keep the contract total
        v = np.zeros(dim)
        v[0] = 1.0
        return v
    return v / n
