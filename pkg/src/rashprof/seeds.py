"""Deterministic derivation of per-task RNG seeds from a master seed.

Every source of randomness in this package draws from a
``numpy.random.Generator`` seeded with a value produced by :func:`derive_seed`.
Parallel work units (bootstrap iterations, trees within a forest) each consume
an independent derived seed, so results are identical for any scheduling or
worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
# splitmix64 constants (Steele, Lea & Flood's mixing function).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def derive_seed(master_seed: int, index: int) -> int:
    """Mix ``(master_seed, index)`` into a 64-bit seed.

    The map ``index -> seed`` is a bijection of the 64-bit integers for any
    fixed master seed (every stage below is invertible mod 2**64), so derived
    seeds never collide for distinct indices.
    """
    z = (master_seed + (index + 1) * _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seeds(master_seed: int, count: int) -> np.ndarray:
    """Vectorized :func:`derive_seed` for indices ``0..count-1`` (uint64)."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(master_seed & _MASK64) + idx * np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def spawn_rng(master_seed: int, index: int) -> np.random.Generator:
    """A fresh PCG64 generator for work unit ``index``."""
    return np.random.default_rng(derive_seed(master_seed, index))
