"""Deterministic seed derivation.

Every random draw in the package flows from a single 64-bit master seed
through a splittable, counter-based generator (Philox).  Sub-streams are
derived from (master seed, path) pairs where the path is a sequence of
ints and short strings, so task generation, particle init and training
are reproducible bit-for-bit on one platform.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed_sequence"]


def _path_entry(entry) -> int:
    if isinstance(entry, (int, np.integer)):
        return int(entry) & 0xFFFFFFFF
    if isinstance(entry, str):
        # stable across processes, unlike hash()
        return zlib.crc32(entry.encode("utf-8"))
    raise TypeError(f"seed path entries must be int or str, got {type(entry)!r}")


def derive_seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for the sub-stream identified by *path under master_seed."""
    return np.random.SeedSequence(
        entropy=int(master_seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=tuple(_path_entry(p) for p in path),
    )


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """Philox generator for the sub-stream identified by *path."""
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, *path)))
