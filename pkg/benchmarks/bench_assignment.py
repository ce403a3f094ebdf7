"""Benchmark the assignment kernel: numba JIT vs pure-numpy fallback.

The kernel dominates exact_w1 for equal-size point clouds, so this is the
one hot loop worth compiling.  Run as:

    python benchmarks/bench_assignment.py [--sizes 64,128,256,512] [--repeats 3]

Set ACDA_DISABLE_NUMBA=1 to verify the fallback path in the main package;
this script imports both implementations directly and times them side by
side regardless of the flag.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from acda import _assignment
from acda._assignment import solve_assignment_numpy

_numba_kernel = _assignment.solve_assignment_loops if _assignment.backend() == "numba" else None


def time_solver(solver, cost: np.ndarray, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        solver(cost)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="64,128,256,512")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    rng = np.random.default_rng(0)
    print(f"{'n':>6} {'numpy (s)':>12} {'numba (s)':>12} {'speedup':>9}")
    for n in sizes:
        cost = rng.random((n, n))
        t_np = time_solver(solve_assignment_numpy, cost, args.repeats)
        if _numba_kernel is not None:
            _numba_kernel(cost)  # warm the JIT cache before timing
            t_nb = time_solver(_numba_kernel, cost, args.repeats)
            print(f"{n:>6} {t_np:>12.4f} {t_nb:>12.4f} {t_np / t_nb:>8.1f}x")
        else:
            print(f"{n:>6} {t_np:>12.4f} {'n/a':>12} {'n/a':>9}")


if __name__ == "__main__":
    main()
