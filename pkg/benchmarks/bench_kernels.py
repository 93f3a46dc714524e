"""Compare the compiled and pure-NumPy kernel backends.

Times the four geometry kernels at a few realistic sizes and prints one
table per kernel.  Run as: python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from pcmae import geometry


def _bench(fn, repeats: int = 7) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    rng = np.random.default_rng(0)
    backends = geometry.available_backends()
    print(f"backends: {backends}\n")
    cases = {
        "pairwise_sq_dist": [
            (f"{n}x{n}", lambda a=rng.standard_normal((n, 3)): geometry
             .pairwise_sq_dist(a, a))
            for n in (256, 1024, 4096)
        ],
        "fps": [
            (f"N={n}, p={p}",
             lambda a=rng.standard_normal((n, 3)), p=p: geometry.fps(a, p))
            for n, p in ((1024, 64), (4096, 128), (16384, 256))
        ],
        "knn": [
            (f"q={q}, N={n}, k=32",
             lambda a=rng.standard_normal((q, 3)),
                    b=rng.standard_normal((n, 3)): geometry.knn(a, b, 32))
            for q, n in ((64, 1024), (256, 4096), (512, 16384))
        ],
        "chamfer_l2": [
            (f"{n} vs {n}",
             lambda a=rng.standard_normal((n, 3)),
                    b=rng.standard_normal((n, 3)): geometry.chamfer_l2(a, b))
            for n in (256, 1024, 4096)
        ],
    }
    for kernel, rows in cases.items():
        print(kernel)
        header = f"  {'case':<18}" + "".join(f"{b:>12}" for b in backends)
        if len(backends) == 2:
            header += f"{'speedup':>10}"
        print(header)
        for label, fn in rows:
            times = {}
            for backend in backends:
                geometry.use_backend(backend)
                times[backend] = _bench(fn)
            line = f"  {label:<18}" + "".join(
                f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            if len(backends) == 2:
                line += f"{times['python'] / times['cython']:>9.1f}x"
            print(line)
        print()


if __name__ == "__main__":
    main()
