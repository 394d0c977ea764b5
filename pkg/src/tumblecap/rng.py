"""Counter-based random streams derived from one 64-bit seed.

Every consumer asks for a named stream, optionally with integer keys such as
an epoch index, so draws do not depend on the order in which modules run.
"""

from __future__ import annotations

import zlib

import numpy as np

U64_MAX = 2 ** 64 - 1


def stream_id(name: str) -> int:
    """Stable 32-bit identifier of a stream name."""
    return zlib.crc32(name.encode("utf-8"))


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return seed


def generator(seed, name: str, *keys) -> np.random.Generator:
    """Philox generator for ``(seed, name, keys...)``."""
    ss = np.random.SeedSequence([check_seed(seed), stream_id(name), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))
