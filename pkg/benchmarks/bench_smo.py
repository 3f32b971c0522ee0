#!/usr/bin/env python3
"""Benchmark of the two SMO solver backends (Cython extension vs pure
numpy) on training sets shaped like the pipeline's pooled epoch features.

Usage: python3 benchmarks/bench_smo.py [--sizes 500,1500,4000] [--repeats 3]
"""

import argparse
import time

import numpy as np

from apnea_screen import svm


def make_training_set(rng, n, d=10, separation=0.8):
    """Two overlapping clusters, standardized; the overlap forces a support
    set and update count comparable to a real pooled-epoch fold."""
    half = n // 2
    pos = rng.normal(separation / 2, 1.0, size=(half, d))
    neg = rng.normal(-separation / 2, 1.0, size=(n - half, d))
    X = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(half), -np.ones(n - half)])
    order = rng.permutation(n)
    X, y = X[order], y[order]
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    return X, y


def bench_backend(backend, X, y, repeats):
    impl = svm._get_backend(backend)
    best = np.inf
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = impl.solve(X, y, 1.0, 1.0 / X.shape[1], 1e-3, 10**6)
        best = min(best, time.perf_counter() - t0)
    alpha, bias, updates, violation, converged = result
    return best, alpha, bias, updates, converged


def dual_objective(X, y, alpha, gamma):
    sq = np.einsum("ij,ij->i", X, X)
    K = np.exp(-gamma * (sq[:, None] + sq[None, :] - 2.0 * X @ X.T))
    coef = alpha * y
    return float(alpha.sum() - 0.5 * coef @ K @ coef)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="300,1000,4000")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    backends = svm.available_backends()
    print(f"available backends: {', '.join(backends)}")
    if "compiled" not in backends:
        print("note: compiled extension not built; benchmarking the fallback only")

    rng = np.random.default_rng(7)
    header = f"{'n':>6} {'backend':>9} {'time (s)':>10} {'updates':>9} {'objective':>12}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        X, y = make_training_set(rng, n)
        times = {}
        for backend in backends:
            elapsed, alpha, bias, updates, converged = bench_backend(backend, X, y, args.repeats)
            obj = dual_objective(X, y, alpha, 1.0 / X.shape[1])
            times[backend] = elapsed
            flag = "" if converged else "  (not converged)"
            print(f"{n:>6} {backend:>9} {elapsed:>10.3f} {updates:>9} {obj:>12.4f}{flag}")
        if len(times) == 2:
            print(f"{'':>6} {'speedup':>9} {times['python'] / times['compiled']:>9.1f}x")
    print()


if __name__ == "__main__":
    main()
