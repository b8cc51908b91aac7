"""Seeded random streams.

The generator is numpy's SFC64 (Small Fast Chaotic, 256-bit state: three
64-bit words of chaotic mixing plus a 64-bit counter). A 64-bit master seed
is expanded into that state by :class:`numpy.random.SeedSequence`, whose
hash-based scrambler is specified and stable across platforms. Each
subsystem draws from its own stream, keyed by ``(seed, tag, *extra)``, so
adding draws in one subsystem does not perturb any other.
"""

from __future__ import annotations

import numpy as np

# Stable integer tags; never renumber (they define every stream's bits).
STREAMS = {
    "weights": 1,
    "shuffle": 2,
    "dropout": 3,
    "noise": 4,
    "augment": 5,
    "split": 6,
    "data": 7,
}


class Rng:
    """Master seed plus derived, independent streams."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)

    def stream(self, tag: str, *extra: int) -> np.random.Generator:
        if tag not in STREAMS:
            raise KeyError(f"unknown rng stream {tag!r}; known: {sorted(STREAMS)}")
        ss = np.random.SeedSequence([self.seed, STREAMS[tag], *[int(e) for e in extra]])
        return np.random.Generator(np.random.SFC64(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def stream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    return Rng(seed).stream(tag, *extra)
