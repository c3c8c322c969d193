#!/usr/bin/env python3
"""Timing comparison between the accelerated kernels and their numpy twins.

The backend is chosen at import time from PEMB_NUMBA, so each backend runs
in its own subprocess; warmup calls keep JIT compilation out of the numbers.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5] [--scale 1.0]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

HERE = os.path.abspath(__file__)
KERNELS = ("bhattacharyya_matrix", "elk_matrix", "kmeans_assign", "pcme_accum")


def _workloads(scale: float):
    import numpy as np

    rng = np.random.default_rng(0)
    n = max(4, int(384 * scale))
    m = max(4, int(768 * scale))
    d = 64
    pts = max(16, int(8192 * scale))
    j = max(8, int(1024 * scale))
    mk = lambda *shape: rng.normal(size=shape)
    pos = lambda *shape: np.exp(rng.normal(size=shape) * 0.3)
    return {
        "bhattacharyya_matrix": (mk(n, d), pos(n, d), mk(m, d), pos(m, d)),
        "elk_matrix": (mk(n, d), pos(n, d), mk(m, d), pos(m, d)),
        "kmeans_assign": (mk(pts, d), mk(64, d)),
        "pcme_accum": (mk(j, d), mk(j, d), 5.0, 5.0),
    }


def _child(repeats: int, scale: float) -> None:
    from pemb import _kernels as K

    loads = _workloads(scale)
    times = {}
    for name in KERNELS:
        fn = getattr(K, name)
        args = loads[name]
        fn(*args)  # warmup; compiles under numba
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(*args)
            best = min(best, time.perf_counter() - t0)
        times[name] = best
    print(json.dumps({"backend": K.backend_name(), "times": times}))


def _run_backend(flag: str, repeats: int, scale: float) -> dict:
    env = dict(os.environ, PEMB_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, HERE, "--as-child", "--repeats", str(repeats),
         "--scale", str(scale)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0,
                    help="problem-size multiplier")
    ap.add_argument("--as-child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.as_child:
        _child(args.repeats, args.scale)
        return 0

    numpy_run = _run_backend("0", args.repeats, args.scale)
    try:
        numba_run = _run_backend("1", args.repeats, args.scale)
    except subprocess.CalledProcessError:
        numba_run = None
        print("numba unavailable; numpy-only timings\n")

    w = max(len(k) for k in KERNELS)
    if numba_run is None:
        print(f"{'kernel':<{w}}  {'numpy (s)':>12}")
        for k in KERNELS:
            print(f"{k:<{w}}  {numpy_run['times'][k]:>12.6f}")
    else:
        print(f"{'kernel':<{w}}  {'numpy (s)':>12}  {'numba (s)':>12}  {'speedup':>8}")
        for k in KERNELS:
            tn = numpy_run["times"][k]
            tb = numba_run["times"][k]
            print(f"{k:<{w}}  {tn:>12.6f}  {tb:>12.6f}  {tn / tb:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
