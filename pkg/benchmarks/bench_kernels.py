"""Compare the compiled IRLS kernel with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]

Fits logistic and log-link Poisson models on random designs of a few sizes
(the largest matches a full-cohort imputation model) and prints the median
wall time per fit for each backend together with the largest coefficient
difference between them.
"""
import argparse
import time

import numpy as np

from ccmi._backend import compiled_fit_irls, python_fit_irls
from ccmi._kernels_py import LOGISTIC, POISSON

SIZES = ((1_000, 8), (3_000, 12), (10_000, 12))


def design(n, p, family, rng):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=0.3, size=p)
    beta[0] = -2.0 if family == POISSON else 0.0
    eta = X @ beta
    prob = np.exp(np.minimum(eta, 0.0)) if family == POISSON else 1 / (1 + np.exp(-eta))
    y = (rng.random(n) < prob).astype(float)
    return np.ascontiguousarray(X), y, np.ones(n)


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if compiled_fit_irls is None:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'family':9s} {'n':>6s} {'p':>3s} {'numpy ms':>9s} {'cython ms':>10s} "
          f"{'speedup':>8s} {'max |diff|':>11s}")
    for family, name in ((LOGISTIC, "logistic"), (POISSON, "poisson")):
        for n, p in SIZES:
            X, y, w = design(n, p, family, rng)
            start = np.zeros(p)
            t_py, a = median_time(lambda: python_fit_irls(X, y, w, family, start), args.repeat)
            t_c, b = median_time(lambda: compiled_fit_irls(X, y, w, family, start), args.repeat)
            diff = float(np.max(np.abs(np.asarray(a[0]) - np.asarray(b[0]))))
            print(f"{name:9s} {n:6d} {p:3d} {1e3 * t_py:9.2f} {1e3 * t_c:10.2f} "
                  f"{t_py / t_c:7.1f}x {diff:11.1e}")


if __name__ == "__main__":
    main()
