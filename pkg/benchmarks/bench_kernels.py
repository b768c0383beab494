"""Compare the compiled kernels with the NumPy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
identical inputs for both backends; outputs are checked for agreement first.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from hurdlecast import _kernels_py as py
from hurdlecast.basis import KnotGrid

try:
    from hurdlecast import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _cases(n_rows, n_taus, seed):
    rng = np.random.default_rng(seed)
    grid = KnotGrid.equispaced(0.0, 1.0, 10)
    x = np.ascontiguousarray(rng.random(n_rows))
    knots = np.ascontiguousarray(grid.extended(), dtype=float)
    pi1 = np.ascontiguousarray(rng.random(n_rows))
    pi2 = np.ascontiguousarray(rng.random(n_rows))
    gain = np.ascontiguousarray(np.log1p(rng.gamma(2.0, 2.0, n_rows)))
    taus = np.ascontiguousarray(rng.random((n_taus, 2)))
    target = float(gain.sum() * 0.1)
    return {
        "bspline_design": (x, knots, grid.degree),
        "threshold_losses": (pi1, pi2, gain, target, taus),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=50_000)
    ap.add_argument("--taus", type=int, default=40, help="candidates per loss call (DE population)")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if cy is None:
        print("compiled kernels are not built; only the NumPy fallback is available")
    cases = _cases(args.rows, args.taus, args.seed)
    print(f"{'kernel':<18} {'numpy [ms]':>11} {'cython [ms]':>12} {'speed-up':>9}")
    for name, inputs in cases.items():
        ref = getattr(py, name)(*inputs)
        t_py = min(timeit.repeat(lambda: getattr(py, name)(*inputs), number=1, repeat=args.repeat))
        if cy is None:
            print(f"{name:<18} {1e3 * t_py:>11.2f} {'-':>12} {'-':>9}")
            continue
        out = getattr(cy, name)(*inputs)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-9)
        t_cy = min(timeit.repeat(lambda: getattr(cy, name)(*inputs), number=1, repeat=args.repeat))
        print(f"{name:<18} {1e3 * t_py:>11.2f} {1e3 * t_cy:>12.2f} {t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
