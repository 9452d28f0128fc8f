"""Run-length encoding of binary point masks over the sorted index space.

The wire form is ``{"n": N, "runs": [start, length, start, length, ...]}``
with runs sorted by start and non-overlapping. Encode/decode are exact
inverses for every mask.
"""

from __future__ import annotations

import numpy as np


class RleError(ValueError):
    pass


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 1:
        raise RleError("mask must be one-dimensional")
    n = mask.shape[0]
    padded = np.r_[False, mask, False]
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    runs = np.empty(2 * starts.size, dtype=np.int64)
    runs[0::2] = starts
    runs[1::2] = lengths
    return {"n": int(n), "runs": [int(v) for v in runs]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        n = int(rle["n"])
        runs = list(rle["runs"])
    except (KeyError, TypeError) as exc:
        raise RleError(f"malformed RLE payload: {exc}") from exc
    if len(runs) % 2 != 0:
        raise RleError("runs must be [start, length] pairs")
    mask = np.zeros(n, dtype=bool)
    prev_end = 0
    for start, length in zip(runs[0::2], runs[1::2]):
        if length < 1 or start < prev_end or start + length > n:
            raise RleError("runs must be sorted, positive, and inside [0, n)")
        mask[start:start + length] = True
        prev_end = start + length
    return mask
