"""Time the jitted kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each workload is run once per backend to warm up (numba compiles, or loads
its on-disk cache, on first call), then timed ``--repeat`` times; the best
time is reported. Outputs of the two backends are compared before timing.
"""

import argparse
import json
import os
import time

import numpy as np

from countlab import kernels
from countlab._accel import ENV_FLAG, HAVE_NUMBA


def _measures(r, B, H, W, sparsity):
    x = r.uniform(size=(B, H, W)) * (r.uniform(size=(B, H, W)) >= sparsity)
    x[:, 0, 0] += 1e-3
    return x / x.sum(axis=(1, 2), keepdims=True)


def workloads(seed=0):
    r = np.random.default_rng(seed)
    pts = r.integers(0, 448, size=(20000, 2))
    cats = r.integers(0, 2, 20000)
    canvas = np.full((448, 448, 3), 0.9)
    nd = 400
    discs = (r.integers(0, 448, nd), r.integers(0, 448, nd), r.uniform(3, 5, nd), r.uniform(0, 1, (nd, 3)), r.uniform(0.7, 1.0, nd))
    a, b = _measures(r, 64, 8, 8, 0.6), _measures(r, 64, 8, 8, 0.0)
    dens = r.uniform(0, 1, (64, 64))
    return {
        "block_counts (20k points)": lambda: kernels.block_counts(pts[:, 0], pts[:, 1], cats, 32, 32, 2, 14),
        "render_discs (400 discs, 448 px)": lambda: kernels.render_discs(canvas.copy(), *discs),
        "sinkhorn_grid (64 problems, 8x8)": lambda: kernels.sinkhorn_grid(a, b, 0.05),
        "sinkhorn_grid_symmetric (64, 8x8)": lambda: kernels.sinkhorn_grid_symmetric(b, 0.05),
        "local_maxima (64x64)": lambda: kernels.local_maxima(dens, 0.3),
    }


def _flatten(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64).ravel() for o in out]
    return [np.asarray(out, dtype=np.float64).ravel()]


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat):
    rows = []
    for name, fn in workloads().items():
        res, outs = {}, {}
        for backend in ("numba", "numpy"):
            if backend == "numba" and not HAVE_NUMBA:
                continue
            os.environ[ENV_FLAG] = "0" if backend == "numba" else "1"
            t0 = time.perf_counter()
            outs[backend] = _flatten(fn())
            res[f"{backend}_first_s"] = time.perf_counter() - t0
            res[f"{backend}_s"] = _time(fn, repeat)
        os.environ.pop(ENV_FLAG, None)
        if len(outs) == 2:
            res["max_abs_diff"] = max(float(np.max(np.abs(x - y), initial=0.0)) for x, y in zip(outs["numba"], outs["numpy"]))
            res["speedup"] = res["numpy_s"] / res["numba_s"]
        rows.append({"kernel": name, **res})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write the results here")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for r in rows:
        print(f"{r['kernel']:36s} {1e3 * r.get('numba_s', float('nan')):10.2f} {1e3 * r['numpy_s']:10.2f} "
              f"{r.get('speedup', float('nan')):8.1f} {r.get('max_abs_diff', float('nan')):9.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
