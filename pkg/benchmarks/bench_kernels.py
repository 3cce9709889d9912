#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from cascaderec.kernels import fallback

try:
    from cascaderec.kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_nearest_centroid(repeats):
    rng = np.random.default_rng(0)
    cases = [(5000, 64, 16), (10000, 256, 32), (20000, 256, 64)]
    print("\nnearest_centroid (n points, K centroids, dim) -- best of", repeats)
    for n, k, d in cases:
        x = rng.standard_normal((n, d))
        c = rng.standard_normal((k, d))
        t_np = timeit(lambda: fallback.nearest_centroid(x, c), repeats)
        line = f"  n={n:>6} K={k:>4} d={d:>3}  numpy {t_np * 1e3:8.2f} ms"
        if _core is not None:
            t_cy = timeit(lambda: _core.nearest_centroid(x, c), repeats)
            line += f"  cython {t_cy * 1e3:8.2f} ms  speedup {t_np / t_cy:5.2f}x"
        print(line)


def bench_gated_attention(repeats):
    rng = np.random.default_rng(1)
    cases = [(64, 4, 48, 16), (128, 8, 101, 16), (256, 8, 101, 16)]
    print("\ngated_attention (batch, heads, L, head_dim), float32 -- best of", repeats)
    for b, h, l, dh in cases:
        q = rng.standard_normal((b, h, l, dh)).astype(np.float32)
        k = rng.standard_normal((b, h, l, dh)).astype(np.float32)
        v = rng.standard_normal((b, h, l, dh)).astype(np.float32)
        fv = rng.integers(0, l // 2, size=b).astype(np.int64)
        t_np = timeit(lambda: fallback.gated_attention(q, k, v, fv, 1.0 / l), repeats)
        line = f"  B={b:>4} h={h} L={l:>4} dh={dh}  numpy {t_np * 1e3:8.2f} ms"
        if _core is not None:
            t_cy = timeit(lambda: _core.gated_attention(q, k, v, fv, 1.0 / l), repeats)
            line += f"  cython {t_cy * 1e3:8.2f} ms  speedup {t_np / t_cy:5.2f}x"
        print(line)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _core is None:
        print("compiled extension not available; reporting fallback only")
    bench_nearest_centroid(args.repeats)
    bench_gated_attention(args.repeats)


if __name__ == "__main__":
    main()
