"""Seeded, splittable random number generation.

Every stochastic choice in the pipeline draws from a generator derived
from the single run-level seed plus a string label, so one seed fully
determines a run and independent components never share a stream.
Python's builtin ``hash`` is salted per process and must not be used
here; derivation goes through blake2b instead.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a child seed from a run seed and a label path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *labels: object) -> np.random.Generator:
    """Generator for the stream named by ``labels`` under ``seed``."""
    return np.random.default_rng(derive_seed(seed, *labels))
