# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels: per-cell mask popcounts and row-major RLE."""

import numpy as np

from libc.stdint cimport int64_t, uint64_t
from libc.string cimport memcpy


def patch_intersections(const unsigned char[:, ::1] mask,
                        const Py_ssize_t[::1] col_edges,
                        const Py_ssize_t[::1] row_edges):
    cdef Py_ssize_t ncols = col_edges.shape[0] - 1
    cdef Py_ssize_t nrows = row_edges.shape[0] - 1
    out = np.zeros(nrows * ncols, dtype=np.int64)
    cdef int64_t[::1] counts = out
    cdef Py_ssize_t r, c, y, x
    cdef int64_t acc
    for r in range(nrows):
        for y in range(row_edges[r], row_edges[r + 1]):
            for c in range(ncols):
                acc = 0
                for x in range(col_edges[c], col_edges[c + 1]):
                    acc += mask[y, x] != 0
                counts[r * ncols + c] += acc
    return out


cdef inline bint _word_uniform(uint64_t w, bint set_run) nogil:
    """True when all eight bytes of ``w`` are zero (or all nonzero if ``set_run``)."""
    if not set_run:
        return w == 0
    return ((w - 0x0101010101010101ULL) & ~w & 0x8080808080808080ULL) == 0


def rle_encode(const unsigned char[::1] flat):
    cdef Py_ssize_t n = flat.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # At most n + 1 runs; the buffer is trimmed on return.
    out = np.empty(n + 1, dtype=np.int64)
    cdef int64_t[::1] runs = out
    cdef const unsigned char* data = &flat[0]
    cdef Py_ssize_t i = 0, k = 0, last = 0
    cdef bint current = 0
    cdef uint64_t w
    with nogil:
        while i < n:
            # Skip whole words that continue the current run.
            if i + 8 <= n:
                memcpy(&w, data + i, 8)
                if _word_uniform(w, current):
                    i += 8
                    continue
            if (data[i] != 0) != current:
                runs[k] = i - last
                k += 1
                last = i
                current = not current
            i += 1
        runs[k] = n - last
    return out[:k + 1]


def rle_decode(counts, Py_ssize_t n):
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] view = out
    cdef Py_ssize_t pos = 0
    cdef Py_ssize_t k, j
    cdef unsigned char value = 0
    for c in counts:
        k = c
        if k < 0:
            raise ValueError("negative run length")
        if pos + k > n:
            raise ValueError("run lengths exceed mask size")
        if value:
            for j in range(pos, pos + k):
                view[j] = 1
        pos += k
        value ^= 1
    if pos != n:
        raise ValueError(f"run lengths sum to {pos}, expected {n}")
    return out
