"""Seed derivation.

Every random draw in a run comes from a stream keyed by the master seed plus
a tuple of (node id, round, purpose tag, ...). Keys are fed to
:class:`numpy.random.SeedSequence`, so a stream never depends on the order in
which other streams were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

Key = int | str


def _key_to_int(key: Key) -> int:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean seed keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(master), *(_key_to_int(k) for k in keys)])


def derive_seed(master: int, *keys: Key) -> int:
    """Return a 64-bit integer seed for the stream named by ``keys``."""
    state = seed_sequence(master, *keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def stream(master: int, *keys: Key) -> np.random.Generator:
    """Return an independent PCG64 generator for the stream named by ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *keys)))
