"""Time the numba and numpy kernel backends on identical inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--batch B]

Prints one line per kernel with the best-of-N wall time of each backend, the
speedup, and the max absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from adlm import kernels
from adlm._accel import HAS_NUMBA


def best_time(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch):
    rng = np.random.default_rng(0)
    x = rng.random((batch, 1, 28, 28))
    w = rng.normal(size=(32, 1, 5, 5))
    gout = rng.normal(size=(batch, 32, 24, 24))
    h = np.abs(rng.normal(size=(batch, 32, 24, 24)))
    _, base = kernels.lrn_conv_forward_numpy(h, 2.0, 5, 1e-4, 0.75)
    lrn = (2.0, 5, 1e-4, 0.75)
    return {
        "conv2d_forward": (lambda k: k(x, w, 1), "conv2d_forward"),
        "conv2d_backward_input": (lambda k: k(gout, w, x.shape, 1), "conv2d_backward_input"),
        "conv2d_backward_weight": (lambda k: k(gout, x, 5, 1), "conv2d_backward_weight"),
        "lrn_conv_forward": (lambda k: k(h, *lrn)[0], "lrn_conv_forward"),
        "lrn_conv_backward": (lambda k: k(h, gout, base, *lrn), "lrn_conv_backward"),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description="numba vs numpy kernel benchmark")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        print("numba is not installed; only the numpy backend is available")
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max|diff|':>12}")
    for label, (call, name) in cases(args.batch).items():
        np_fn = getattr(kernels, f"{name}_numpy")
        t_np = best_time(lambda: call(np_fn), args.repeat)
        if HAS_NUMBA:
            nb_fn = getattr(kernels, f"{name}_numba")
            t_nb = best_time(lambda: call(nb_fn), args.repeat)
            diff = float(np.max(np.abs(call(np_fn) - call(nb_fn))))
            print(f"{label:<24}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>9.2f}{diff:>12.2e}")
        else:
            print(f"{label:<24}{t_np * 1e3:>10.2f}{'-':>10}{'-':>9}{'-':>12}")


if __name__ == "__main__":
    main()
