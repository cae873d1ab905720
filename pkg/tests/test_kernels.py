import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from subjectforge import kernels
from subjectforge.geometry import grid_edges

BACKENDS = kernels.available_backends()


def test_compiled_backend_is_built():
    # The editable install compiles the extension; the fallback is only for
    # environments without a compiler.
    assert "cython" in BACKENDS
    assert kernels.BACKEND == "cython"


def test_env_var_forces_fallback():
    code = "import subjectforge.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, SUBJECTFORGE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(st.data())
def test_patch_intersections_match_oracle(name, data):
    M = data.draw(st.integers(1, 5))
    w, h = data.draw(st.integers(M, 18)), data.draw(st.integers(M, 18))
    rows = data.draw(st.lists(st.lists(st.booleans(), min_size=w, max_size=w), min_size=h, max_size=h))
    mask = np.array(rows, dtype=bool)
    got = kernels.patch_intersections(mask, grid_edges(w, M), grid_edges(h, M), impl=BACKENDS[name])
    pixels = oracles.mask_pixels(rows)
    expected = [len(pixels & cell) for cell in oracles.tile_pixels(w, h, M)]
    assert [int(v) for v in got] == expected


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(st.lists(st.booleans(), max_size=200))
def test_rle_round_trip(name, flat):
    impl = BACKENDS[name]
    arr = np.array(flat, dtype=bool)
    counts = kernels.rle_encode(arr, impl=impl)
    assert counts == oracles.rle(flat)
    assert kernels.rle_decode(counts, len(flat), impl=impl).astype(bool).tolist() == flat


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("counts,n", [([2, -1, 3], 4), ([1, 1], 3), ([5], 4)])
def test_rle_decode_rejects_bad_counts(name, counts, n):
    with pytest.raises(ValueError):
        kernels.rle_decode(counts, n, impl=BACKENDS[name])


def test_backends_agree_on_large_mask():
    rng = np.random.default_rng(3)
    mask = rng.random((257, 311)) < 0.4
    xs, ys = grid_edges(311, 8), grid_edges(257, 8)
    results = {n: kernels.patch_intersections(mask, xs, ys, impl=m) for n, m in BACKENDS.items()}
    first = next(iter(results.values()))
    for r in results.values():
        assert np.array_equal(r, first)
    assert int(first.sum()) == int(mask.sum())
