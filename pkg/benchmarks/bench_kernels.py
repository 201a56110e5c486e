"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 128]

Each kernel runs on inputs the size of one default training batch; the
last rows time a full encoder forward + backward with each backend wired in.
"""
import argparse
import time

import numpy as np

from finprint import kernels, model
from finprint.core import RngState
from finprint.model import EncoderConfig

KERNEL_NAMES = ("im2col", "col2im", "maxpool2_forward", "maxpool2_backward")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, rng):
    x = rng.standard_normal((batch, 64, 64, 8))
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))))
    dcols = rng.standard_normal((batch * 64 * 64, 72))
    pooled, arg = kernels.maxpool2_forward(x)
    up = rng.standard_normal(pooled.shape)
    n = 400
    f = rng.integers(0, 40, n)
    bx, by = rng.uniform(0, 100, n), rng.uniform(0, 100, n)
    bw, bh = rng.uniform(5, 30, n), rng.uniform(5, 30, n)
    dist = kernels.box_distance_matrix(f, bx, by, bw, bh, 1 / 30, 1e9)
    return {
        "im2col 128x64x64x8": lambda k: k.im2col(xp, 3),
        "col2im 128x64x64x8": lambda k: k.col2im(dcols, batch, 64, 64, 8, 3),
        "maxpool fwd": lambda k: k.maxpool2_forward(x),
        "maxpool bwd": lambda k: k.maxpool2_backward(up, arg, 64, 64),
        "box distance 400": lambda k: k.box_distance_matrix(f, bx, by, bw, bh, 1 / 30, 1e9),
        "dbscan 400": lambda k: k.dbscan_labels(dist, 0.4, 3),
    }


def encoder_step(backend, w, x):
    saved = {name: getattr(kernels, name) for name in KERNEL_NAMES}
    try:
        for name in KERNEL_NAMES:
            setattr(kernels, name, getattr(backend, name))
        u, cache = model.forward(w, x)
        model.backward(w, cache, u)
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()
    found = kernels.backends()
    names = sorted(found)
    rng = np.random.default_rng(0)
    print(f"selected backend: {kernels.BACKEND}; available: {', '.join(names)}")
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    rows = cases(args.batch, rng)
    w = model.init(EncoderConfig(), RngState(0))
    x = rng.uniform(size=(args.batch, 64, 64, 1))
    rows["encoder fwd+bwd"] = lambda k: encoder_step(k, w, x)
    for label, fn in rows.items():
        t = {n: best_of(lambda: fn(found[n]), args.repeat) for n in names}
        line = f"{label:<24}" + "".join(f"{t[n] * 1e3:>10.2f}ms" for n in names)
        if len(names) == 2:
            line += f"{t['python'] / t['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
