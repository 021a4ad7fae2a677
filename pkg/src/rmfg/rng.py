"""Counter-based random streams derived from a single master seed.

Every stochastic component asks for a stream by ``(master_seed, tag, index)``.
The key is the first 128 bits of BLAKE2b over ``"rmfg|<seed>|<tag>|<index>"``
and feeds a Philox-4x64 generator, so a stream depends only on those three
values and never on how work is scheduled across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "stream"]


def derive_key(master_seed: int, tag: str, index: int = 0) -> int:
    if master_seed < 0 or master_seed >= 2**64:
        raise ValueError(f"master seed must be a 64-bit unsigned integer, got {master_seed}")
    msg = f"rmfg|{int(master_seed)}|{tag}|{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=16).digest(), "little")


def stream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, tag, index) triple."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, tag, index)))
