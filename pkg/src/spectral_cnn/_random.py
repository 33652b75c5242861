"""Named random substreams derived from one user-visible seed."""

import zlib

import numpy as np


def substream(seed, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream ``name`` of ``seed``; ``extra`` ints index sub-substreams.

    Changing how one stream is consumed never perturbs another stream.
    """
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, np.random.Generator):
        return seed
    key = [int(seed), zlib.crc32(name.encode("utf-8"))] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))
