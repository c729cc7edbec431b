"""Counter-based deterministic random numbers.

All randomness in the toolkit (weight init, dropout masks, dataset
generation) flows through this module so that every draw is a pure function
of ``(seed, *tags, counter)``. That keeps training runs replayable
bit-for-bit across processes and platforms, with no hidden generator state.

The generator is the splitmix64 finalizer applied to a per-key affine
counter stream. Each derived key is meant to parameterize exactly one
logical draw site (one weight matrix, one dropout mask, ...).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _fold(key: int, part: int | str) -> int:
    if isinstance(part, str):
        h = _FNV_OFFSET
        for byte in part.encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK
        part = h
    return _mix(key ^ (part & _MASK))


def derive_key(seed: int, *parts: int | str) -> int:
    """Derive a 64-bit stream key from a seed and a path of tags."""
    key = _mix(seed & _MASK)
    for part in parts:
        key = _fold(key, part)
    return key


def random_bits(key: int, n: int, offset: int = 0) -> np.ndarray:
    """n raw 64-bit words from the keyed counter stream."""
    counters = np.arange(offset, offset + n, dtype=np.uint64)
    z = np.uint64(key) + counters * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def uniform(key: int, n: int, offset: int = 0) -> np.ndarray:
    """n float64 samples in [0, 1), using the top 53 bits of each word."""
    bits = random_bits(key, n, offset)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normal(key: int, n: int, std: float = 1.0) -> np.ndarray:
    """n standard-normal float64 samples via Box-Muller (no rejection)."""
    u1 = uniform(key, n)
    u2 = uniform(key, n, offset=n)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    z = radius * np.cos(2.0 * math.pi * u2)
    if std != 1.0:
        z *= std
    return z


def permutation(key: int, n: int) -> np.ndarray:
    """Deterministic permutation of range(n) (argsort of a uniform draw)."""
    return np.argsort(uniform(key, n), kind="stable")
