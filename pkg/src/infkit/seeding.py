"""Named seed derivation: every random stream is ``(seed, purpose, index...)``."""

import zlib

import numpy as np


def derive_seed(seed: int, purpose: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(purpose.encode()), *map(int, index)])


def derive_rng(seed: int, purpose: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, *index))


def derive_int(seed: int, purpose: str, *index: int) -> int:
    """A 63-bit integer seed for handing to a sub-component."""
    return int(derive_seed(seed, purpose, *index).generate_state(1, np.uint64)[0] >> np.uint64(1))
