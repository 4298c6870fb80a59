"""Counter-based deterministic random streams.

Selection tie-breaking and simulated landmark detection must be reproducible
and independent of iteration order or of what else happens to be selected, so
instead of drawing from a stateful generator we hash (seed, salt, id) tuples
through a SplitMix64-style finalizer.  The same id always yields the same
draw for a given seed and salt, which is what lets two selection policies
share one stream of observation outcomes.
"""

from __future__ import annotations

import numpy as np

_MASK_INT = 0xFFFFFFFFFFFFFFFF
# SplitMix64 finalizer constants (Steele et al., the golden-gamma mixer).
_GAMMA_INT = 0x9E3779B97F4A7C15
_MIX1_INT = 0xBF58476D1CE4E5B9
_MIX2_INT = 0x94D049BB133111EB

_MASK = np.uint64(_MASK_INT)
_GAMMA = np.uint64(_GAMMA_INT)
_MIX1 = np.uint64(_MIX1_INT)
_MIX2 = np.uint64(_MIX2_INT)
_INV_2_64 = float(2.0**-64)


def _mix(x: np.ndarray) -> np.ndarray:
    # Array-only: numpy wraps uint64 arrays silently but warns on scalars.
    x = (x + _GAMMA) & _MASK
    x = ((x ^ (x >> np.uint64(30))) * _MIX1) & _MASK
    x = ((x ^ (x >> np.uint64(27))) * _MIX2) & _MASK
    return x ^ (x >> np.uint64(31))


def _mix_int(x: int) -> int:
    x = (x + _GAMMA_INT) & _MASK_INT
    x = ((x ^ (x >> 30)) * _MIX1_INT) & _MASK_INT
    x = ((x ^ (x >> 27)) * _MIX2_INT) & _MASK_INT
    return x ^ (x >> 31)


def hash_stream(seed: int, salt: int, ids: np.ndarray) -> np.ndarray:
    """Return one uint64 word per id, deterministic in (seed, salt, id)."""
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    salt_word = np.uint64((salt * _MIX2_INT) & _MASK_INT)
    h = _mix(np.uint64(seed & _MASK_INT) ^ (ids * _MIX1 & _MASK))
    return _mix(h ^ salt_word)


def uniform01(seed: int, salt: int, ids: np.ndarray) -> np.ndarray:
    """Uniform draws in [0, 1), one per id, keyed by (seed, salt, id)."""
    return hash_stream(seed, salt, ids).astype(np.float64) * _INV_2_64


def normal_pair_stream(seed: int, salt: int) -> float:
    """One standard normal draw keyed by (seed, salt), via Box-Muller."""
    u = uniform01(seed, salt, np.array([1, 2], dtype=np.int64))
    u1 = max(u[0], _INV_2_64)  # guard log(0)
    return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1]))


def derive_seed(seed: int, name: str) -> int:
    """Derive a named child seed, so one experiment seed fans out into
    independent streams (world, sorties, observations, tie-breaks)."""
    h = seed & _MASK_INT
    for ch in name.encode("utf-8"):
        h = _mix_int(h ^ ch)
    return h
