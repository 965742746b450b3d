"""Named random substreams derived from one root seed.

``substream(7, "augment.viewA")`` always yields the same generator no matter
which other streams were drawn before it, so adding a new consumer never
perturbs existing ones.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def child_seed(seed: int, name: str) -> int:
    """A plain integer seed for code that wants an int rather than a Generator."""
    return int(substream(seed, name).integers(0, 2**31 - 1))
