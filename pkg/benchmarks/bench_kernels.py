"""Compiled vs pure-numpy kernels: timings and a bit-equality check.

    python3 benchmarks/bench_kernels.py [--sizes 512 2048 8192] [--repeat 5]

Prints one ``metric=value`` line per (kernel, backend, size) and a
speedup line per (kernel, size).
"""
import argparse
import time

import numpy as np

from cra_pcn import geometry, kernels


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, rng):
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    query = pts[: n // 4]
    c = geometry.centroid(pts)
    rows = rng.integers(0, n // 4, size=n * 16)
    src = rng.normal(size=(n * 16, 32))
    return {
        "fps": lambda: kernels.fps_indices(pts, n // 4, c),
        "knn": lambda: kernels.knn_indices(query, pts, 16),
        "scatter_add": lambda: kernels.scatter_add_rows(np.zeros((n // 4, 32)), rows, src),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[512, 2048, 8192])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("note=compiled extension not built; timing the numpy fallback only")
    for n in args.sizes:
        timings, outputs = {}, {}
        for backend in backends:
            kernels.use_backend(backend)
            for name, fn in cases(n, np.random.default_rng(n)).items():
                outputs[name, backend] = fn()
                timings[name, backend] = _time(fn, args.repeat)
                print(f"kernel={name} backend={backend} n={n} seconds={timings[name, backend]:.6f}")
        if len(backends) == 2:
            for name in ("fps", "knn", "scatter_add"):
                same = _same(outputs[name, "python"], outputs[name, "cython"])
                speedup = timings[name, "python"] / timings[name, "cython"]
                print(f"kernel={name} n={n} speedup={speedup:.2f} identical={same}")
    kernels.use_backend(backends[-1])


if __name__ == "__main__":
    main()
