"""Named random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``.

    Any 64-bit integer is accepted as ``seed``; negative values wrap.
    """
    key = [int(seed) & _MASK64, zlib.crc32(name.encode())] + [int(i) for i in index]
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(seed: int, name: str, *index: int) -> int:
    return int(substream(seed, name, *index).integers(0, 2**63 - 1))
