"""Master-seed splitting.

Every randomized component draws its own integer seed as
`child_seed(master, *path)` where the path is a stable sequence of role
strings and indices (e.g. `("attack", 2, "nr")`). Strings are crc32-hashed,
the whole path feeds a numpy SeedSequence, so any module can be re-run in
isolation with a reproducible stream and no two roles collide.
"""
from __future__ import annotations

import zlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def child_seed(master: int, *path) -> int:
    seq = np.random.SeedSequence([int(master) & 0xFFFFFFFF] + [_token(p) for p in path])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def child_rng(master: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(master, *path)))
