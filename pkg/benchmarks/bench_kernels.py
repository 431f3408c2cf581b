"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run on the same batch with both backends; the table shows
the best wall time of ``--repeat`` runs and the speed-up.
"""

import argparse
import time

import numpy as np

from spdfield import kernels


def _spd(rng, count, n):
    a = rng.normal(size=(count, n, n))
    return a @ a.transpose(0, 2, 1) + 0.1 * np.eye(n)


def cases(rng):
    spd = _spd(rng, 4000, 3)
    n = 2000
    sub = -np.ones((200, n - 1))
    diag = 2.5 + rng.random((200, n))
    rhs = rng.normal(size=(200, n))
    a = 0.5 + 3 * rng.random(20000)
    x = 5 * rng.random(20000)
    p = rng.uniform(0.01, 0.99, 5000)
    return [
        ("jacobi_eigh 4000x3x3", "jacobi_eigh", lambda: (spd.copy(), 1e-13, 100)),
        ("chol_upper 4000x3x3", "chol_upper", lambda: (spd.copy(), 1e-14)),
        ("thomas 200x2000", "thomas", lambda: (sub.copy(), diag.copy(), sub.copy(), rhs.copy())),
        ("gammainc 20000", "gammainc", lambda: (a, x)),
        ("gammaincinv 5000", "gammaincinv", lambda: (a[:5000], p, False, 1e-12)),
    ]


def best_time(func, make_args, repeat):
    best = np.inf
    for _ in range(repeat):
        args = make_args()
        t0 = time.perf_counter()
        func(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        cy = None
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'python [s]':>12}{'cython [s]':>12}{'speed-up':>10}")
    for label, name, make_args in cases(rng):
        t_py = best_time(getattr(py, name), make_args, args.repeat)
        if cy is None:
            print(f"{label:<24}{t_py:>12.4f}{'-':>12}{'-':>10}")
            continue
        t_cy = best_time(getattr(cy, name), make_args, args.repeat)
        print(f"{label:<24}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>10.1f}")


if __name__ == "__main__":
    main()
