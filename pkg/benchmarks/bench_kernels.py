"""Benchmark the conv-lowering kernels: compiled extension vs pure numpy.

Times im2col, col2im, and a full conv2d forward+backward at training-like
shapes, checks that both backends produce bit-identical arrays, and
prints a table with the speedup of the compiled path.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 20]
"""

import argparse
import time

import numpy as np

from fedrecon import kernels, ops
from fedrecon.autodiff import Tensor, backward
from fedrecon.kernels import fallback

try:
    from fedrecon import _kernels as compiled
except ImportError:
    compiled = None

# (n, c, h, w, out_c, k, stride): encoder-ish, bottleneck-ish, and big cases
CASES = [
    (8, 8, 64, 64, 8, 3, 1),
    (8, 32, 16, 16, 32, 3, 1),
    (16, 8, 32, 32, 16, 3, 1),
    (4, 1, 128, 128, 8, 3, 1),
]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(backend, case, repeats):
    n, c, h, w, out_c, k, stride = case
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, c, h + 2, w + 2))  # pre-padded input
    cols = backend.im2col(x, k, k, stride)
    g = rng.normal(size=cols.shape)
    t_im2col = timeit(lambda: backend.im2col(x, k, k, stride), repeats)
    t_col2im = timeit(
        lambda: backend.col2im(g, n, c, h + 2, w + 2, k, k, stride), repeats
    )

    saved_im2col, saved_col2im = kernels.im2col, kernels.col2im
    kernels.im2col, kernels.col2im = backend.im2col, backend.col2im
    try:
        xa = rng.normal(size=(n, c, h, w))
        wa = rng.normal(size=(out_c, c, k, k))

        def conv_step():
            xt = Tensor(xa, requires_grad=True)
            wt = Tensor(wa, requires_grad=True)
            backward(ops.conv2d(xt, wt, stride=stride, padding=1).sum())
            return xt.grad, wt.grad

        t_conv = timeit(conv_step, max(1, repeats // 2))
        conv_out = conv_step()
    finally:
        kernels.im2col, kernels.col2im = saved_im2col, saved_col2im
    return {
        "im2col": (t_im2col, cols),
        "col2im": (t_col2im, backend.col2im(g, n, c, h + 2, w + 2, k, k, stride)),
        "conv2d fwd+bwd": (t_conv, np.concatenate([a.ravel() for a in conv_out])),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if compiled is None:
        print("compiled extension not built; showing numpy backend only")
    print(f"active backend at import: {kernels.BACKEND}")
    header = f"{'case':<24} {'op':<16} {'numpy':>10} {'cython':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    all_match = True
    for case in CASES:
        n, c, h, w, out_c, k, stride = case
        label = f"{n}x{c}x{h}x{w} k{k}s{stride}"
        numpy_res = bench_backend(fallback, case, args.repeats)
        cython_res = bench_backend(compiled, case, args.repeats) if compiled else None
        for op_name, (t_np, arr_np) in numpy_res.items():
            if cython_res is None:
                print(f"{label:<24} {op_name:<16} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
                continue
            t_cy, arr_cy = cython_res[op_name]
            match = arr_np.tobytes() == arr_cy.tobytes()
            all_match = all_match and match
            status = "" if match else "  MISMATCH"
            print(
                f"{label:<24} {op_name:<16} {t_np * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
                f"{t_np / t_cy:>7.2f}x{status}"
            )
            label = ""
    if compiled:
        print("values bit-identical across backends" if all_match
              else "BACKEND OUTPUTS DIVERGE")


if __name__ == "__main__":
    main()
