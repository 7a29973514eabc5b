"""Benchmark the compiled convolution kernels against the numpy fallback.

Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats 5]

The same functions are imported twice: once from whatever backend the
package selected at import, and once with LAYOUTSEG_NO_EXT=1 forced via a
subprocess-free reload of the numpy module. Reported times are the best of
`--repeats` runs.
"""

import argparse
import time

import numpy as np

from layoutseg._kernels import BACKEND
from layoutseg._kernels import conv_numpy as np_impl

if BACKEND == "compiled":
    from layoutseg._kernels import _convext as ext_impl
else:
    ext_impl = None


CASES = [
    # (label, n, c, h, w, kh, kw, stride, padding, dilation)
    ("conv 3x3 s1 64ch 64px", 2, 64, 64, 64, 3, 3, 1, 1, 1),
    ("conv 3x3 s2 64ch 64px", 2, 64, 64, 64, 3, 3, 2, 1, 1),
    ("conv 3x3 d2 64ch 32px", 2, 64, 32, 32, 3, 3, 1, 2, 2),
    ("conv 7x7 s2 3ch 128px", 2, 3, 128, 128, 7, 7, 2, 3, 1),
]

DW_CASES = [
    ("depthwise 3x3 64ch 64px", 2, 64, 64, 64),
    ("depthwise 3x3 128ch 32px", 2, 128, 32, 32),
]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_im2col(impl, repeats):
    rows = []
    rng = np.random.default_rng(0)
    for label, n, c, h, w, kh, kw, stride, padding, dilation in CASES:
        x = rng.normal(size=(n, c, h, w))
        cols = impl.im2col(x, kh, kw, stride, padding, dilation)
        ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
        wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
        fwd = best_of(lambda: impl.im2col(x, kh, kw, stride, padding,
                                          dilation), repeats)
        bwd = best_of(lambda: impl.col2im(cols, n, c, h, w, kh, kw, stride,
                                          padding, dilation, ho, wo), repeats)
        rows.append((label + " (im2col)", fwd))
        rows.append((label + " (col2im)", bwd))
    return rows


def bench_depthwise(impl, repeats):
    rows = []
    rng = np.random.default_rng(1)
    for label, n, c, h, w in DW_CASES:
        x = rng.normal(size=(n, c, h, w))
        k = rng.normal(size=(c, 3, 3))
        y = impl.depthwise_forward(x, k, 1, 1)
        rows.append((label + " (fwd)",
                     best_of(lambda: impl.depthwise_forward(x, k, 1, 1),
                             repeats)))
        rows.append((label + " (bwd)",
                     best_of(lambda: impl.depthwise_backward(x, k, y, 1, 1),
                             repeats)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"selected backend at import: {BACKEND}")
    numpy_rows = bench_im2col(np_impl, args.repeats) + \
        bench_depthwise(np_impl, args.repeats)
    if ext_impl is None:
        print("compiled extension unavailable; numpy-only timings:\n")
        for label, t in numpy_rows:
            print(f"  {label:<34} {t * 1e3:8.2f} ms")
        return

    ext_rows = bench_im2col(ext_impl, args.repeats) + \
        bench_depthwise(ext_impl, args.repeats)
    width = max(len(label) for label, _ in numpy_rows)
    print(f"\n{'case':<{width}}  {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for (label, tn), (_, te) in zip(numpy_rows, ext_rows):
        print(f"{label:<{width}}  {tn * 1e3:8.2f}ms {te * 1e3:8.2f}ms "
              f"{tn / te:7.2f}x")


if __name__ == "__main__":
    main()
