"""Platform-stable seed derivation.

Every random choice in the pipeline draws from a generator seeded by
hashing a tuple of labels, so results depend only on those labels.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np


def _digest(parts) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        if isinstance(p, (bytes, bytearray, memoryview)):
            data = bytes(p)
            tag = b"b"
        else:
            data = str(p).encode("utf-8")
            tag = type(p).__name__.encode("ascii")
        h.update(tag + len(data).to_bytes(8, "little") + data)
    return h.digest()


def derive_seed(*parts) -> int:
    """63-bit seed from an arbitrary tuple of labels."""
    return int.from_bytes(_digest(parts)[:8], "little") >> 1


def unit_uniform(*parts) -> float:
    """Deterministic draw from [0, 1)."""
    return (int.from_bytes(_digest(parts)[8:16], "little") >> 11) / float(1 << 53)


def py_rng(*parts) -> random.Random:
    return random.Random(derive_seed(*parts))


def np_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
