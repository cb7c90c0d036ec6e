"""Seeded random number generation shared by every pipeline stage.

All randomness goes through numpy's PCG64 bit generator. Per-cell and
per-window seeds are derived from a master seed with ``SeedSequence`` so a
run is reproducible from its configuration alone.
"""

from typing import Union

import numpy as np

RNG_NAME = "numpy.PCG64"

SeedKey = Union[int, str]


def make_rng(seed: int) -> np.random.Generator:
    """Create a PCG64 generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, str):
        # stable across processes, unlike hash()
        return int.from_bytes(key.encode("utf-8"), "little")
    return int(key)


def derive_seed(master: int, *keys: SeedKey) -> int:
    """
    Derive a child seed from a master seed and a path of keys.

    Args:
        master: Master seed of the run
        keys: Cell coordinates (indices or short names)

    Returns:
        Non-negative 63-bit integer seed
    """
    entropy = [int(master)] + [_key_to_int(k) for k in keys]
    seq = np.random.SeedSequence(entropy)
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
