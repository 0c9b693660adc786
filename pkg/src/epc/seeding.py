"""Deterministic RNG derivation: every stream descends from one master seed.

Streams are addressed by a path of labels, e.g. ``rng(seed, "stage", 2,
"mutant", 0)``. String labels are hashed with SHA-256 so derivation never
depends on process-level hash randomization.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=tuple(_token(p) for p in path))


def rng(master: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *path)))


def child_seed(master: int, *path) -> int:
    """A derived 63-bit integer seed, for APIs that take plain seeds."""
    return int(seed_sequence(master, *path).generate_state(1, np.uint64)[0] >> 1)
