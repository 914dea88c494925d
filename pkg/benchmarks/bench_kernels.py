"""Time the numba and numpy tree kernels on synthetic data.

Both backends are imported side by side, so RISKWATCH_BACKEND does not
matter here. Outputs are checked for equality before timing.

    python3 benchmarks/bench_kernels.py --rows 2000 --features 20 --repeat 5
"""
from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from riskwatch import _kernels

logger = logging.getLogger("bench_kernels")


def make_data(rows: int, features: int, seed: int):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(rows, features)), 2)
    y = (X[:, 0] - X[:, 1] + 0.5 * X[:, 2] + rng.normal(0, 0.7, rows) > 0).astype(float)
    return X, y, rng


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def pack(trees):
    arrays = [[], [], [], [], []]
    offsets = []
    base = 0
    for t in trees:
        offsets.append(base)
        for dst, src in zip(arrays, t[:5]):
            dst.append(src)
        base += len(t[0])
    feature, threshold, left, right, value = (np.concatenate(a) for a in arrays)
    return feature, threshold, left, right, value, np.asarray(offsets, dtype=np.int64)


def run(rows: int, features: int, depth: int, min_leaf: int, n_trees: int, repeat: int, seed: int):
    if _kernels.numba_build_tree is None:
        raise SystemExit("numba is not installed")
    X, y, rng = make_data(rows, features, seed)
    max_nodes = _kernels.max_tree_nodes(rows, depth, min_leaf)
    m = max(1, int(np.sqrt(features)))
    jobs = []
    for _ in range(n_trees):
        jobs.append((rng.integers(0, rows, rows), rng.random((max_nodes, features))))

    def build(kernel):
        return [kernel(X, y, r, _kernels.GINI, depth, min_leaf, m, k, max_nodes) for r, k in jobs]

    # warm up the jit and check that the backends agree
    fast = build(_kernels.numba_build_tree)
    slow = build(_kernels.numpy_build_tree)
    for a, b in zip(fast, slow):
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
    packed = pack(fast)
    np.testing.assert_array_equal(_kernels.numba_forest_sum(X, *packed),
                                  _kernels.numpy_forest_sum(X, *packed))

    results = []
    for name, kernel in (("numba", _kernels.numba_build_tree), ("numpy", _kernels.numpy_build_tree)):
        results.append(("build_tree", name, best_of(lambda k=kernel: build(k), repeat)))
    for name, kernel in (("numba", _kernels.numba_forest_sum), ("numpy", _kernels.numpy_forest_sum)):
        results.append(("forest_sum", name, best_of(lambda k=kernel: k(X, *packed), repeat)))
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2000)
    ap.add_argument("--features", type=int, default=20)
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--min-leaf", type=int, default=5)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    results = run(args.rows, args.features, args.depth, args.min_leaf, args.trees, args.repeat, args.seed)
    by_kernel: dict[str, dict[str, float]] = {}
    print(f"{'kernel':<12}{'backend':<8}{'seconds':>10}")
    for kernel, backend, sec in results:
        by_kernel.setdefault(kernel, {})[backend] = sec
        print(f"{kernel:<12}{backend:<8}{sec:>10.4f}")
    for kernel, t in by_kernel.items():
        print(f"{kernel}: numba is {t['numpy'] / t['numba']:.1f}x faster")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
