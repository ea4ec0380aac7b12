"""Benchmark the numba kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--sizes 128,512,1024] [--repeats 5]

The same functions back both code paths (selected at import time by the
DCSNET_KERNELS environment variable); here both modules are imported
directly so one process can time them side by side.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dcsnet import _kernels_numpy

try:
    from dcsnet import _kernels_numba
except ImportError:
    _kernels_numba = None


def _time(fn, repeats: int) -> float:
    fn()  # warm up (numba compilation, caches)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(sizes: list[int], repeats: int):
    rng = np.random.default_rng(0)
    backends = [("numpy", _kernels_numpy)]
    if _kernels_numba is not None:
        backends.append(("numba", _kernels_numba))

    header = f"{'kernel':<16}{'n':>6}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'ratio':>9}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        pts = rng.normal(size=(n, 3))
        queries = rng.normal(size=(n // 4, 3))
        cost = np.sqrt(_kernels_numpy.pairwise_sqdist(pts, rng.normal(size=(n, 3))))
        cases = {
            "pairwise_sqdist": lambda impl: impl.pairwise_sqdist(pts, pts),
            "fps_indices": lambda impl: impl.fps_indices(pts, max(2, n // 8), 0),
            "knn_indices": lambda impl: impl.knn_indices(pts, queries, 16),
            "hungarian": lambda impl: impl.hungarian(cost),
        }
        for kernel, call in cases.items():
            times = [_time(lambda impl=impl: call(impl), repeats) for _, impl in backends]
            ratio = times[0] / times[-1] if len(times) > 1 and times[-1] > 0 else float("nan")
            row = f"{kernel:<16}{n:>6}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
            print(row + (f"{ratio:>8.1f}x" if len(times) > 1 else ""))
        print()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="128,512,1024",
                    help="comma-separated point counts to benchmark")
    ap.add_argument("--repeats", type=int, default=5, help="timed repeats per case (best is kept)")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",") if s]
    bench(sizes, args.repeats)


if __name__ == "__main__":
    main()
