"""Seed derivation for reproducible parallel runs.

Per-trajectory seeds come from folding an index path into the master seed
with splitmix64 finalizer rounds: trajectory i of a run seeded with S draws
from ``generator(S, i)``, and independent sub-streams of one trajectory
extend the path (``generator(S, i, 1)`` for the SFG start vector, etc.).
The scheme is documented here so runs can be reproduced piecewise.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *path: int) -> int:
    """Fold an index path into a master seed, one splitmix64 round per element."""
    s = master & _MASK64
    for p in path:
        s = _mix((s + _GOLDEN * ((p & _MASK64) + 1)) & _MASK64)
    return s


def generator(master: int, *path: int) -> np.random.Generator:
    """PCG64 generator seeded from the derived seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
