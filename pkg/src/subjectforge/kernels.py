"""Hot pixel kernels, backed by the compiled extension when it is importable.

Set ``SUBJECTFORGE_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SUBJECTFORGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _as_u8(mask: np.ndarray) -> np.ndarray:
    if mask.dtype == np.bool_:
        mask = mask.view(np.uint8)
    return np.ascontiguousarray(mask, dtype=np.uint8)


def patch_intersections(mask: np.ndarray, col_edges, row_edges, impl=None) -> np.ndarray:
    """Set-pixel count of ``mask`` inside every grid cell, row-major.

    ``col_edges``/``row_edges`` are the M+1 cell boundaries along each axis.
    """
    impl = impl or _impl
    return impl.patch_intersections(
        _as_u8(mask),
        np.ascontiguousarray(col_edges, dtype=np.intp),
        np.ascontiguousarray(row_edges, dtype=np.intp),
    )


def rle_encode(mask: np.ndarray, impl=None) -> list[int]:
    impl = impl or _impl
    runs = impl.rle_encode(_as_u8(mask).ravel())
    return runs.tolist() if isinstance(runs, np.ndarray) else list(runs)


def rle_decode(counts, n: int, impl=None) -> np.ndarray:
    impl = impl or _impl
    return np.asarray(impl.rle_decode(counts, n), dtype=np.uint8)


def available_backends() -> dict:
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
