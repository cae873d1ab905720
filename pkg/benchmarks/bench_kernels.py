"""Compare the compiled and numpy kernel backends on realistic mask sizes.

Usage::

    python3 benchmarks/bench_kernels.py --size 512 --grid 8 --repeat 50
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from subjectforge import kernels
from subjectforge.geometry import grid_edges


def _random_mask(size: int, seed: int) -> np.ndarray:
    """A blob-like mask: a filled ellipse with speckle, similar to a segmenter output."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    rx, ry = rng.uniform(0.1, 0.3, 2) * size
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return inside ^ (rng.random((size, size)) < 0.02)


def bench(size: int, grid: int, repeat: int) -> dict:
    mask = _random_mask(size, 0)
    cols, rows = grid_edges(size, grid), grid_edges(size, grid)
    counts = kernels.rle_encode(mask)
    results = {}
    for name, impl in sorted(kernels.available_backends().items()):
        cases = {
            "patch_intersections": lambda: kernels.patch_intersections(mask, cols, rows, impl=impl),
            "rle_encode": lambda: kernels.rle_encode(mask, impl=impl),
            "rle_decode": lambda: kernels.rle_decode(counts, mask.size, impl=impl),
        }
        results[name] = {
            case: min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3 for case, fn in cases.items()
        }
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=512, help="mask side in pixels")
    parser.add_argument("--grid", type=int, default=8, help="grid side M")
    parser.add_argument("--repeat", type=int, default=30, help="timing repetitions (best is kept)")
    parser.add_argument("--json", action="store_true", help="print raw timings as JSON")
    args = parser.parse_args(argv)

    results = bench(args.size, args.grid, args.repeat)
    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True))
        return 0
    print(f"mask {args.size}x{args.size}, grid {args.grid}x{args.grid}, best of {args.repeat} (ms)")
    backends = sorted(results)
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in results[backends[0]]:
        row = f"{case:<22}" + "".join(f"{results[b][case]:>12.3f}" for b in backends)
        if "cython" in results and "python" in results:
            row += f"{results['python'][case] / results['cython'][case]:>11.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
