"""Time the compiled isotonic kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Both backends are run on identical inputs and their outputs compared, so a
speedup is only reported for matching results.
"""

from __future__ import annotations

import argparse
import time
from contextlib import contextmanager

import numpy as np

from isocal import _pyfallback, isotonic

try:
    from isocal import _core
except ImportError:  # extension not built
    _core = None


@contextmanager
def kernels(module):
    saved = isotonic._kernels
    isotonic._kernels = module
    try:
        yield
    finally:
        isotonic._kernels = saved


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def pava_case(n, rng):
    y = rng.normal(size=n).cumsum()[::-1] + rng.normal(scale=3, size=n)
    w = rng.uniform(0.1, 2.0, size=n)
    return lambda: isotonic.pava_nonincreasing(y, w)


def projection_case(n, k, rng):
    # noisy survival-like surface: decreasing in time and risk plus noise
    base = np.exp(-np.outer(np.linspace(0.2, 3, n), np.linspace(0.05, 1, k)))
    m = base + rng.normal(scale=0.2, size=(n, k))
    return lambda: isotonic.project_doubly_monotone(m, tol=1e-6, check_every=5)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = p.parse_args(argv)
    if _core is None:
        raise SystemExit("compiled extension not available; run pip install -e . first")
    rng = np.random.default_rng(0)
    if args.quick:
        cases = [("pava n=10^4", pava_case(10_000, rng)),
                 ("projection 200x50", projection_case(200, 50, rng))]
    else:
        cases = [("pava n=10^4", pava_case(10_000, rng)),
                 ("pava n=10^5", pava_case(100_000, rng)),
                 ("projection 200x50", projection_case(200, 50, rng)),
                 ("projection 1000x100", projection_case(1000, 100, rng))]
    print(f"{'case':22s} {'cython (s)':>11s} {'python (s)':>11s} {'speedup':>8s}")
    for name, fn in cases:
        with kernels(_core):
            t_c, out_c = best_of(fn, args.repeat)
        with kernels(_pyfallback):
            t_p, out_p = best_of(fn, args.repeat)
        diff = float(np.max(np.abs(out_c - out_p)))
        if diff > 1e-8:
            raise SystemExit(f"{name}: backends disagree by {diff:.3g}")
        print(f"{name:22s} {t_c:11.4f} {t_p:11.4f} {t_p / t_c:7.1f}x")


if __name__ == "__main__":
    main()
