"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py [--repeats N]
The same workloads the tracker runs are timed on both paths; results
are printed as one table row per kernel.
"""

import argparse
import os
import time

import numpy as np

import aftn._kernels as K


def timeit(fn, *args, repeats=5, full_blas=False):
    """Best-of-N wall time in ms; numpy timings get their BLAS threads back
    (importing the numba path caps BLAS at one thread for the whole process)."""

    def run():
        fn(*args)

    if full_blas:
        try:
            import threadpoolctl

            with threadpoolctl.threadpool_limits(os.cpu_count(), "blas"):
                return _best(run, repeats)
        except ImportError:
            pass
    return _best(run, repeats)


def _best(run, repeats):
    run()  # warm-up (and jit compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        best = min(best, time.perf_counter() - t0)
    return best * 1000


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    rows = []

    # conv layer 1 of a batch-16 training step (the dominant workload)
    x = rng.standard_normal((16, 3, 224, 224))
    wm = rng.standard_normal((4, 3 * 7 * 7))
    bias = rng.standard_normal(4)
    go = rng.standard_normal((16, 4, 109, 109))
    rows.append(("conv_forward 16x3x224x224 k7s2",
                 timeit(K.conv_forward_jit, x, wm, bias, 7, 2, repeats=args.repeats),
                 timeit(K.conv_forward_numpy, x, wm, bias, 7, 2, repeats=args.repeats, full_blas=True)))
    rows.append(("conv_grad_weights (same)",
                 timeit(K.conv_grad_weights_jit, x, go, 7, 2, repeats=args.repeats),
                 timeit(K.conv_grad_weights_numpy, x, go, 7, 2, repeats=args.repeats, full_blas=True)))

    x2 = rng.standard_normal((16, 4, 58, 58))
    wm2 = rng.standard_normal((8, 4 * 5 * 5))
    go2 = rng.standard_normal((16, 8, 27, 27))
    rows.append(("conv_grad_input 16x4x58x58 k5s2",
                 timeit(K.conv_grad_input_jit, go2, wm2, 4, 58, 58, 5, 2, repeats=args.repeats),
                 timeit(K.conv_grad_input_numpy, go2, wm2, 4, 58, 58, 5, 2, repeats=args.repeats, full_blas=True)))

    xp = rng.standard_normal((16, 4, 109, 109))
    rows.append(("maxpool_forward 16x4x109x109 k3s2",
                 timeit(K.maxpool_forward_jit, xp, 3, 2, repeats=args.repeats),
                 timeit(K.maxpool_forward_numpy, xp, 3, 2, repeats=args.repeats, full_blas=True)))
    _, idx = K.maxpool_forward_jit(xp, 3, 2)
    gp = rng.standard_normal(idx.shape)
    rows.append(("maxpool_backward (same)",
                 timeit(K.maxpool_backward_jit, idx, gp, 109, 109, repeats=args.repeats),
                 timeit(K.maxpool_backward_numpy, idx, gp, 109, 109, repeats=args.repeats, full_blas=True)))

    img = rng.uniform(0, 255, (240, 320, 3))
    fill = np.array([104.0, 117.0, 123.0])
    rows.append(("bilinear_patch 320x240 -> 224",
                 timeit(K.bilinear_patch_jit, img, 20.0, 15.0, 80.0, 224, fill,
                        repeats=args.repeats),
                 timeit(K.bilinear_patch_numpy, img, 20.0, 15.0, 80.0, 224, fill,
                        repeats=args.repeats, full_blas=True)))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba ms':>9}  {'numpy ms':>9}  {'speedup':>7}")
    for name, jt, nt in rows:
        print(f"{name:<{width}}  {jt:9.2f}  {nt:9.2f}  {nt / jt:6.1f}x")


if __name__ == "__main__":
    main()
