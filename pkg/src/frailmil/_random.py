"""Seed plumbing.

Every random stream in the package is a Philox (counter-based) generator whose
key comes from the user seed plus a tuple of names, e.g.
``derive_seed(7, "model-init")``. Names are hashed with CRC32 so the derivation
is stable across Python processes and versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_words(names) -> list[int]:
    words = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode("utf-8")))
    return words


def derive_seed(seed: int, *names) -> int:
    """64-bit sub-seed for the stream identified by ``names``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_name_words(names)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, *names)))
