"""numpy implementations of the pixel kernels; used when the extension is absent."""

from __future__ import annotations

import numpy as np


def patch_intersections(mask: np.ndarray, col_edges: np.ndarray, row_edges: np.ndarray) -> np.ndarray:
    counts = np.add.reduceat(mask.astype(np.int64), row_edges[:-1], axis=0)
    counts = np.add.reduceat(counts, col_edges[:-1], axis=1)
    return counts.ravel()


def rle_encode(flat: np.ndarray) -> list[int]:
    if flat.size == 0:
        return []
    bits = flat != 0
    change = np.flatnonzero(bits[1:] != bits[:-1]) + 1
    bounds = np.concatenate(([0], change, [bits.size]))
    runs = np.diff(bounds).tolist()
    if bits[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts, n: int) -> np.ndarray:
    counts = np.asarray(list(counts), dtype=np.int64)
    if (counts < 0).any():
        raise ValueError("negative run length")
    total = int(counts.sum())
    if total != n:
        raise ValueError(f"run lengths sum to {total}, expected {n}")
    values = np.arange(counts.size, dtype=np.uint8) & 1
    return np.repeat(values, counts)
