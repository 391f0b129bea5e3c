#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Both variants are called directly, so the PANDORA_DISABLE_NUMBA flag does not
matter here. Outputs are cross-checked before timing.
"""
import argparse
import time

import numpy as np

from pandora import ndkernel as nk
from pandora import _jit
from pandora._jit import HAVE_NUMBA
from pandora.toydenoiser import build_denoiser


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def cases(rng):
    n = 256
    a, b = rng.normal(size=(n, 32)), rng.normal(size=(32, n))
    s = rng.normal(0.0, 3.0, (n, n))
    obj = np.zeros(n, np.bool_)
    obj[100:140] = True
    rows = np.flatnonzero(obj).astype(np.int64)
    k = np.int64(13)
    return [
        ("matmul 256x32 @ 32x256", nk._matmul_nb, nk._matmul_np, (a, b)),
        ("softmax_rows 256x256", nk._softmax_rows_nb, nk._softmax_rows_np, (s,)),
        ("topk_row n=256 k=13", nk._topk_row_nb, nk._topk_row_np, (s[0], k)),
        ("dissolve_rows 40 of 256", nk._dissolve_rows_nb, nk._dissolve_rows_np, (s, rows, obj, k)),
    ]


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    if isinstance(x, np.ndarray):
        return np.allclose(x, y, rtol=1e-12, atol=0.0)
    return x == y


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow, inputs in cases(rng):
        if not same(fast(*inputs), slow(*inputs)):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = best_of(fast, inputs, args.repeat)
        t_np = best_of(slow, inputs, args.repeat)
        print(f"{name:<28s} {t_nb:>10.3f} {t_np:>10.3f} {t_np / t_nb:>7.1f}x")

    # end to end: one denoiser forward, which is what the removal loop repeats 2T times
    den = build_denoiser(0, 4, 32, 32)
    x = rng.normal(size=(4, 32, 32))
    for flag in (True, False):
        _jit.USE_NUMBA = flag
        ms = best_of(den, (x, 25), args.repeat)
        print(f"{'denoiser forward 4x32x32':<28s} {'numba' if flag else 'numpy':>10s} {ms:>10.3f} ms")


if __name__ == "__main__":
    main()
