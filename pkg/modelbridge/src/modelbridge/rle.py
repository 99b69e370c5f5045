"""Uncompressed run-length mask encoding (column-major, zero run first).

This is the wire format the toolkit's clients expect:
``{"size": [H, W], "counts": [n0, n1, ...]}`` where runs alternate between
zeros and ones down the columns.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    mask = mask.astype(bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    counts = [int(c) for c in np.diff(boundaries)]
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": counts}


def decode(obj: dict) -> np.ndarray:
    h, w = (int(v) for v in obj["size"])
    counts = list(obj["counts"])
    if sum(counts) != h * w:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if run < 0:
            raise ValueError("RLE counts must be nonnegative")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")
