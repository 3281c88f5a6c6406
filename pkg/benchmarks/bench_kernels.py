"""Time the numba and numpy warp kernels on augmentation-sized inputs.

    python benchmarks/bench_kernels.py [--size 512] [--repeat 20]
"""

import argparse
import time

import numpy as np

from cosingan import kernels


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    n = args.size
    src = rng.uniform(-1, 1, (n, n))
    lab = rng.integers(0, 3, (n, n))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    ys = yy + rng.normal(0, 2, (n, n))
    xs = xx + rng.normal(0, 2, (n, n))
    rows = []
    for name, fn in (("bilinear", lambda j: kernels.remap_bilinear(src, ys, xs, use_jit=j)),
                     ("nearest", lambda j: kernels.remap_nearest(lab, ys, xs, use_jit=j))):
        t_np = _time(lambda: fn(False), args.repeat)
        t_jit = _time(lambda: fn(True), args.repeat) if kernels.HAVE_NUMBA else float("nan")
        rows.append((name, t_np, t_jit))
    print(f"{'kernel':<10}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}   ({n}x{n}, {args.repeat} reps)")
    for name, t_np, t_jit in rows:
        print(f"{name:<10}{1e3 * t_np:>12.2f}{1e3 * t_jit:>12.2f}{t_np / t_jit:>10.2f}")


if __name__ == "__main__":
    main()
