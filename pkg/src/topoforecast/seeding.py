"""Deterministic RNG stream derivation.

Every random draw in the project flows from one integer seed. Subsystems
get independent streams keyed by name, so adding a new consumer never
perturbs the draws of existing ones. Derivation goes through SHA-256,
which is stable across processes and platforms (python's builtin hash
is not).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """Return an independent generator for (seed, stream name)."""
    digest = hashlib.sha256(f"{int(seed)}/{stream}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
