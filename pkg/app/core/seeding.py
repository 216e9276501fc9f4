"""Deterministic seed derivation for independent RNG streams"""

import zlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]


def _as_entropy(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFF


def derive_seed(master_seed: int, *keys: SeedKey) -> int:
    """Derive a 32-bit seed from a master seed and a path of keys.

    Streams derived from different key paths are statistically independent
    and the mapping is stable across processes and platforms.
    """
    entropy = [_as_entropy(master_seed)] + [_as_entropy(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(master_seed: int, *keys: SeedKey) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *keys))
