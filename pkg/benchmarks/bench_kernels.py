"""Compare the numba and numpy variants of the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--particles N] [--steps S] [--size PX] [--repeat R]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from affinegs import kernels


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_rollout(n, steps, repeat, rng):
    x0 = rng.normal(size=(n, 3))
    ls0 = rng.normal(size=(n, 3)) * 0.1
    q0 = rng.normal(size=(n, 4))
    q0 /= np.linalg.norm(q0, axis=1, keepdims=True)
    w0 = rng.normal(size=(steps, n, 12)) * 0.3
    w1 = rng.normal(size=(steps, n, 12)) * 0.3
    h = np.full(steps, 1.0 / steps)
    args = (x0, ls0, q0, w0, w1, h)
    rows = [("rollout", "numpy", *_best(lambda: kernels.rollout_affine_numpy(*args), repeat))]
    if kernels.HAVE_NUMBA:
        kernels.rollout_affine_numba(*args)  # compile
        rows.append(("rollout", "numba", *_best(lambda: kernels.rollout_affine_numba(*args), repeat)))
    return rows


def bench_composite(n, size, repeat, rng):
    means = rng.uniform(0, size, size=(n, 2))
    sig = rng.uniform(0.5, 3.0, size=n)
    conics = np.stack([1 / sig ** 2, np.zeros(n), 1 / sig ** 2], axis=1)
    alphas = rng.uniform(0.2, 0.9, size=n)
    colors = rng.uniform(size=(n, 3))
    bg = np.zeros(3)
    args = (means, conics, alphas, colors, size, size, bg)
    rows = [("composite", "numpy", *_best(lambda: kernels.composite_numpy(*args), repeat))]
    if kernels.HAVE_NUMBA:
        kernels.composite_numba(*args)
        rows.append(("composite", "numba", *_best(lambda: kernels.composite_numba(*args), repeat)))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = bench_rollout(args.particles, args.steps, args.repeat, rng)
    rows += bench_composite(args.particles, args.size, args.repeat, rng)
    ref, ref_sec = {}, {}
    print(f"{'kernel':<10} {'variant':<6} {'best [ms]':>10} {'speedup':>8}  max|diff|")
    for kernel, variant, sec, out in rows:
        out = out if isinstance(out, tuple) else (out,)
        if variant == "numpy":
            ref[kernel], ref_sec[kernel] = out, sec
            diff = 0.0
        else:
            diff = max(float(np.max(np.abs(a - b))) for a, b in zip(out, ref[kernel]))
        print(f"{kernel:<10} {variant:<6} {1e3 * sec:>10.2f} {ref_sec[kernel] / sec:>8.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
