"""Time each hot kernel on its numba path and its numpy path.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The numba path is skipped when numba is missing or UTOPIA_DISABLE_NUMBA=1.
Each kernel is warmed up once per path so JIT compilation is not timed.
"""
import argparse
import timeit

import numpy as np

from utopia import _accel, kernels


def cases(rng):
    n, d = 5000, 10
    delta = rng.uniform(-0.03, 0.03, (n, d))
    grad = rng.normal(size=(n, d))
    mom = rng.normal(size=(n, d))
    lo, hi = np.full((n, d), -0.5), np.full((n, d), 0.5)
    tokens = [4, 7, 3]
    offsets = np.concatenate([[0], np.cumsum(tokens)])
    scores = rng.normal(size=(n, offsets[-1]))
    cur = np.stack([rng.integers(0, t, n) for t in tokens], 1)
    a = rng.normal(size=(40, 40))
    return {
        "pgd_update (5000x10)": lambda: kernels.pgd_update(delta, grad, mom, 1.0, 0.003, 0.03, lo, hi),
        "greedy_substitute (5000 rows, 3 features)": lambda: kernels.greedy_substitute(scores, offsets, cur, 2),
        "lambertw_array (10000 points)": lambda: kernels.lambertw_array(np.logspace(-6, 6, 10_000)),
        "power_iteration (40x40)": lambda: kernels.power_iteration(a @ a.T),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    paths = [False] + ([True] if _accel.HAVE_NUMBA else [])
    print(f"{'kernel':45s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for flag in paths:
            _accel.USE_NUMBA = flag
            fn()
            times[flag] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        nb = times.get(True)
        cols = f"{times[False]:10.3f} " + (f"{nb:10.3f} {times[False] / nb:7.1f}x" if nb else f"{'n/a':>10s}")
        print(f"{name:45s} {cols}")


if __name__ == "__main__":
    main()
