"""Splittable counter-based random streams.

Every random draw in the system comes from an independent Philox stream
keyed by (seed, purpose tag, integer indices), so dropout, diffusion-time
sampling and noise draws are reproducible in isolation and insensitive to
the order in which other streams are consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Independent generator for (seed, tag, indices)."""
    msg = f"{seed}|{tag}|" + "|".join(str(i) for i in indices)
    digest = hashlib.blake2b(msg.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    # SeedSequence with explicit entropy keeps construction cheap (no urandom)
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(key)))


def derive_seed(seed: int, tag: str, *indices: int) -> int:
    """Stable 63-bit sub-seed (for objects that store a seed, e.g. scripts)."""
    msg = f"{seed}|{tag}|" + "|".join(str(i) for i in indices)
    digest = hashlib.blake2b(msg.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
