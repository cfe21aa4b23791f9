"""Timing comparison of the numba and numpy convolution backends.

Runs the forward, input-gradient, and weight-gradient kernels at a few
training-representative shapes on both backends and prints per-call wall
times plus the speed ratio.  The first numba call includes JIT compilation,
so each case is warmed before timing.

Usage: python benchmarks/bench_conv.py [--repeats 5] [--quick]
"""

import argparse
import time

import numpy as np

from exposura import kernels

# (label, batch, in_c, out_c, height, width, kernel, stride)
CASES = [
    ("encoder 64x64", 1, 64, 128, 32, 32, 4, 2),
    ("encoder 256px", 1, 128, 256, 64, 64, 4, 2),
    ("residual 3x3", 1, 512, 512, 16, 16, 3, 1),
    ("disc head 4x4", 1, 256, 512, 16, 16, 4, 1),
]


def time_case(backend_name, case, repeats):
    _, b, ci, co, h, w, k, stride = case
    kernels.set_backend(backend_name)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, ci, h, w)).astype(np.float32)
    wt = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    pad = 1
    y = kernels.conv2d_forward(x, wt, stride=stride, pad=pad)
    gy = np.ones_like(y)

    def run():
        kernels.conv2d_forward(x, wt, stride=stride, pad=pad)
        kernels.conv2d_grad_input(gy, wt, stride=stride, pad=pad,
                                  in_h=h, in_w=w)
        kernels.conv2d_grad_weight(x, gy, stride=stride, pad=pad, k=k)

    run()  # warm-up: triggers JIT compilation on the numba path
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timed repetitions per case (best is reported)")
    ap.add_argument("--quick", action="store_true",
                    help="only run the first case")
    args = ap.parse_args()

    cases = CASES[:1] if args.quick else CASES
    previous = kernels.get_backend()

    print(f"{'case':<16} {'numba':>10} {'numpy':>10} {'numpy/numba':>12}")
    try:
        for case in cases:
            t_nb = time_case("numba", case, args.repeats)
            t_np = time_case("numpy", case, args.repeats)
            print(f"{case[0]:<16} {t_nb * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms "
                  f"{t_np / t_nb:>11.2f}x")
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":
    main()
