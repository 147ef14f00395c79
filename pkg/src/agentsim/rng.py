"""Counter-based random numbers.

A draw is a pure function of ``(seed, agent key, iteration, stream, ordinal)``,
so results do not depend on worker count, rank count, or iteration order.
The mixer is the splitmix64 finalizer applied over the packed counter words.
"""

from __future__ import annotations

import numpy as np

from ._jit import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# Stream ids used by the engine and the presets. Keep them distinct.
STREAM_INIT = 1
STREAM_INFECTION = 2
STREAM_RECOVERY = 3
STREAM_MOVEMENT = 4
STREAM_BROWNIAN = 5
STREAM_DEATH = 6
STREAM_DIVISION = 7
STREAM_DIVISION_AXIS = 8
STREAM_COLLISION = 9
STREAM_LINEAGE = 10
STREAM_INIT_TYPE = 11
STREAM_INIT_RANK = 12

# Iteration value used for draws made during model initialization.
INIT_ITERATION = 0xFFFFFFFF


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def hash_u64(seed, key, iteration, stream, ordinal):
    g = np.uint64(0x9E3779B97F4A7C15)
    h = _mix(np.uint64(seed) + g)
    h = _mix(h ^ (np.uint64(key) + g))
    word = (np.uint64(iteration) << np.uint64(32)) | (np.uint64(stream) << np.uint64(16)) | np.uint64(ordinal)
    return _mix(h ^ (word + g))


@njit(inline="always")
def uniform_nb(seed, key, iteration, stream, ordinal):
    return float(hash_u64(seed, key, iteration, stream, ordinal) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def _mix_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_np(seed, keys, iteration, stream, ordinal) -> np.ndarray:
    """Vectorized twin of :func:`hash_u64`; any argument may be an array."""
    with np.errstate(over="ignore"):
        keys = np.asarray(keys, dtype=np.uint64)
        h = _mix_np(np.asarray(seed, dtype=np.uint64) + _GOLDEN)
        h = _mix_np(h ^ (keys + _GOLDEN))
        word = (
            (np.asarray(iteration, dtype=np.uint64) << np.uint64(32))
            | (np.asarray(stream, dtype=np.uint64) << np.uint64(16))
            | np.asarray(ordinal, dtype=np.uint64)
        )
        return _mix_np(h ^ (word + _GOLDEN))


def uniform_np(seed, keys, iteration, stream, ordinal) -> np.ndarray:
    return (hash_np(seed, keys, iteration, stream, ordinal) >> np.uint64(11)).astype(np.float64) * _INV53


def rng_draw(seed: int, key: int, iteration: int, stream: int, ordinal: int = 0) -> float:
    """One uniform draw in ``[0, 1)`` for an agent key."""
    return float(uniform_np(seed, np.uint64(key), iteration, stream, ordinal))


def derive_key(parent_key, iteration) -> np.ndarray:
    """Lineage key for a daughter created by ``parent_key`` at ``iteration``."""
    return hash_np(0, parent_key, iteration, STREAM_LINEAGE, 0)


@njit(inline="always")
def derive_key_nb(parent_key, iteration):
    return hash_u64(0, parent_key, iteration, 10, 0)


@njit(inline="always")
def unit_vector_nb(seed, key, iteration, stream):
    """Uniform direction on the unit sphere (z uniform in [-1,1], azimuth uniform)."""
    z = 2.0 * uniform_nb(seed, key, iteration, stream, 0) - 1.0
    phi = 2.0 * np.pi * uniform_nb(seed, key, iteration, stream, 1)
    s = np.sqrt(max(0.0, 1.0 - z * z))
    return s * np.cos(phi), s * np.sin(phi), z


def unit_vector_np(seed, keys, iteration, stream) -> np.ndarray:
    z = 2.0 * uniform_np(seed, keys, iteration, stream, 0) - 1.0
    phi = 2.0 * np.pi * uniform_np(seed, keys, iteration, stream, 1)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
