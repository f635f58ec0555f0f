"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--points 100000] [--centroids 256] [--repeat 5]

Also checks that both backends agree exactly on every output.
"""

import argparse
import timeit

import numpy as np

from maskplan import kernels


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--centroids", type=int, default=256)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    g = np.random.default_rng(args.seed)
    pts = g.normal(size=(args.points, 2)) * 10.0
    cen = g.normal(size=(args.centroids, 2)) * 10.0
    labels = g.integers(0, args.centroids, size=args.points)

    backends = ["python"]
    try:
        from maskplan import _kernels  # noqa: F401

        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")

    cases = {
        "assign_nearest": lambda b: kernels.assign_nearest(pts, cen, backend=b),
        "knn": lambda b: kernels.knn(pts[: args.points // 10], cen, args.k, backend=b),
        "cluster_sums": lambda b: kernels.cluster_sums(pts, labels, args.centroids, backend=b),
    }
    print(f"{'kernel':<16}{'backend':<10}{'best ms':>10}")
    for name, fn in cases.items():
        best = {}
        for b in backends:
            t = timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)
            best[b] = min(t) * 1e3
            print(f"{name:<16}{b:<10}{best[b]:>10.2f}")
        if len(backends) == 2:
            for a, c in zip(fn("cython"), fn("python")):
                if not np.array_equal(a, c):
                    raise SystemExit(f"{name}: backends disagree")
            print(f"{name:<16}{'speedup':<10}{best['python'] / best['cython']:>10.2f}x")


if __name__ == "__main__":
    main()
