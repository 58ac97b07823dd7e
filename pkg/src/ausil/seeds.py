"""Deterministic RNG streams derived from a single integer seed.

Every random choice in the package (corpus synthesis, weight init, triplet
shuffling) draws from a named stream so that adding a consumer never shifts
the values another consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the stream `name` under the run seed."""
    if not isinstance(seed, int):
        raise ValueError(f"seed must be an int, got {type(seed).__name__}")
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _name_key(name)])
    return np.random.Generator(np.random.PCG64(ss))


def substream(seed: int, name: str, index: int) -> np.random.Generator:
    """Stream for the `index`-th item of a named family (clip k, epoch k, ...)."""
    return stream(seed, f"{name}/{index}")
