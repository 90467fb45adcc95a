"""Time the compiled and numpy hash-grid kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--points 20000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from triplane_slam import _pure
from triplane_slam.hash_plane import LevelLayout
from triplane_slam.submap import map_sizing

try:
    from triplane_slam import _ext
except ImportError:
    _ext = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(mod, uv, table, lay, dout, repeat):
    n = uv.shape[0]
    out = np.empty((n, lay.levels * table.shape[-1]))
    grad = np.zeros_like(table)
    duv = np.zeros_like(uv)
    args = (lay.offsets, lay.res, lay.dense, lay.hsize)
    fwd = best_of(lambda: mod.hash2d_forward(uv, table, *args, out), repeat)
    bwd = best_of(lambda: mod.hash2d_backward(uv, table, *args, dout, grad, duv, True, True), repeat)
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--side", type=float, default=3.0, help="submap edge length in meters")
    args = ap.parse_args()

    n_max, H = map_sizing(args.side ** 3)
    lay = LevelLayout.build(16, n_max, 16, H)
    rng = np.random.default_rng(0)
    uv = rng.random((args.points, 3, 2))
    table = rng.uniform(-1e-4, 1e-4, (3, lay.total, 2))
    dout = rng.normal(size=(args.points, lay.levels * 2))

    print(f"tri-plane encode, {args.points} points, N_max={n_max}, H={H}, 16 levels")
    print(f"{'backend':<10}{'forward s':>12}{'backward s':>12}{'pts/s fwd':>14}")
    rows = {}
    for name, mod in (("cython", _ext), ("python", _pure)):
        if mod is None:
            print(f"{name:<10}{'not built':>12}")
            continue
        fwd, bwd = bench(mod, uv, table, lay, dout, args.repeat)
        rows[name] = (fwd, bwd)
        print(f"{name:<10}{fwd:>12.4f}{bwd:>12.4f}{args.points / fwd:>14.0f}")
    if len(rows) == 2:
        f = rows["python"][0] / rows["cython"][0]
        b = rows["python"][1] / rows["cython"][1]
        print(f"speedup: forward {f:.1f}x, backward {b:.1f}x")


if __name__ == "__main__":
    main()
