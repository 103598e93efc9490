"""Deterministic seed derivation.

A single user seed fans out into independent streams (one per coarsening
level, one per purpose such as ``"init"`` or ``"split"``) through the
splitmix64 finalizer::

    z = (x + 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z = z ^ (z >> 31)

``hash64(seed, k)`` applies the finalizer to ``seed`` and then to
``mix ^ k``.  Purpose strings are folded to an integer with FNV-1a (64 bit)
before mixing.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def hash64(seed: int, key: int | str) -> int:
    if isinstance(key, str):
        key = fnv1a64(key)
    return splitmix64(splitmix64(seed & MASK64) ^ (key & MASK64))


def derive_seed(seed: int, *keys: int | str) -> int:
    out = seed & MASK64
    for key in keys:
        out = hash64(out, key)
    return out


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
