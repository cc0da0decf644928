"""Deterministic seed streams.

A single user seed fans out into named sub-streams (``"fit"``, ``"sim"``,
``"impute"``...) so adding randomness to one command never shifts another.
"""

import zlib

import numpy as np


def stream(seed, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def rng(seed, name: str) -> np.random.Generator:
    return np.random.default_rng(stream(seed, name))


def child_seeds(seed, name: str, n: int) -> list:
    """``n`` independent child sequences of the named stream."""
    return stream(seed, name).spawn(n)


def int_seeds(seed_seq: np.random.SeedSequence, n: int) -> np.ndarray:
    """``n`` 31-bit integers for kernels that seed their own generator."""
    return (seed_seq.generate_state(n, dtype=np.uint32) >> 1).astype(np.int64)
