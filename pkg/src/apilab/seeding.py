"""Portable seeded substreams.

All randomness goes through numpy's Philox counter-based generator keyed by
a ``SeedSequence`` whose spawn key is ``(purpose tag, *indices)``. A stream
therefore depends only on the seed and its key, never on generation order.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag(name: str) -> int:
    """Stable 32-bit integer for a purpose string."""
    return zlib.crc32(name.encode("utf-8"))


def _sequence(seed: int, purpose: str, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(tag(purpose),) + tuple(int(k) for k in keys))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(_sequence(seed, purpose, keys)))


def derive_seed(seed: int, purpose: str, *keys: int) -> int:
    """A child 64-bit seed, e.g. one run seed per (cell, mdp, run)."""
    return int(_sequence(seed, purpose, keys).generate_state(1, np.uint64)[0])
