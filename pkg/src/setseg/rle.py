"""Row-major run-length encoding of binary grids.

Counts alternate zeros/ones and always start with a (possibly zero) count of
zeros, e.g. a 2x2 grid of ones is ``"0,4"``.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> str:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts: list[int] = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = bool(v)
            run = 1
    counts.append(run)
    return ",".join(str(c) for c in counts)


def decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    counts = [int(c) for c in rle.split(",")] if rle else []
    if any(c < 0 for c in counts):
        raise ValueError(f"negative run in RLE {rle!r}")
    total = int(np.prod(shape))
    if sum(counts) != total:
        raise ValueError(f"RLE covers {sum(counts)} cells, grid has {total}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return flat.reshape(shape)
