"""Compare the compiled and numpy convolution kernels: speed and agreement.

Run as: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from asapseg.kernels import HAVE_COMPILED, python_ref

if HAVE_COMPILED:
    from asapseg.kernels import _convext

SHAPES = [
    # (n, c_in, h, w, c_out, k, stride, pad), sampled from the model's layers
    (4, 3, 64, 128, 16, 3, 2, 1),
    (4, 16, 32, 64, 32, 3, 2, 1),
    (4, 64, 8, 16, 128, 3, 2, 1),
    (4, 64, 16, 32, 64, 3, 1, 1),
    (1, 64, 16, 32, 64, 1, 1, 0),
]


def timeit(fn, repeats=20, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.mean(times), np.percentile(times, 50), np.percentile(times, 95)


def main():
    print(f"compiled extension available: {HAVE_COMPILED}")
    rng = np.random.default_rng(0)
    header = (f"{'shape':<36} {'dir':<8} {'numpy ms':>9} "
              f"{'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    print(header)
    print("-" * len(header))
    for n, ci, h, w, co, k, stride, pad in SHAPES:
        x = rng.normal(size=(n, ci, h, w))
        wt = rng.normal(size=(co, ci, k, k))
        b = rng.normal(size=co)
        label = f"{n}x{ci}x{h}x{w} -> {co}, k={k}, s={stride}"

        y_np = python_ref.conv2d_forward(x, wt, b, stride, pad)
        g = rng.normal(size=y_np.shape)
        fm, _, _ = timeit(lambda: python_ref.conv2d_forward(x, wt, b, stride, pad))
        bm, _, _ = timeit(lambda: python_ref.conv2d_backward(
            x, wt, g, stride, pad, True))
        if HAVE_COMPILED:
            y_c = np.asarray(_convext.conv2d_forward(x, wt, b, stride, pad))
            fdiff = np.abs(y_np - y_c).max()
            fc, _, _ = timeit(lambda: _convext.conv2d_forward(x, wt, b, stride, pad))
            bx_np = python_ref.conv2d_backward(x, wt, g, stride, pad, True)
            bx_c = _convext.conv2d_backward(x, wt, g, stride, pad, True)
            bdiff = max(np.abs(np.asarray(a) - np.asarray(bb)).max()
                        for a, bb in zip(bx_np, bx_c))
            bc, _, _ = timeit(lambda: _convext.conv2d_backward(
                x, wt, g, stride, pad, True))
            print(f"{label:<36} {'fwd':<8} {fm * 1e3:>9.3f} {fc * 1e3:>12.3f} "
                  f"{fm / fc:>8.2f} {fdiff:>11.2e}")
            print(f"{label:<36} {'bwd':<8} {bm * 1e3:>9.3f} {bc * 1e3:>12.3f} "
                  f"{bm / bc:>8.2f} {bdiff:>11.2e}")
        else:
            print(f"{label:<36} {'fwd':<8} {fm * 1e3:>9.3f} {'-':>12} "
                  f"{'-':>8} {'-':>11}")
            print(f"{label:<36} {'bwd':<8} {bm * 1e3:>9.3f} {'-':>12} "
                  f"{'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
