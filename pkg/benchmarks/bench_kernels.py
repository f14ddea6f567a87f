"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from agreelab import kernels


def cases(rng):
    out = {}
    for T, d in ((16, 32), (40, 64)):
        xw, wh = rng.normal(size=(T, d)), rng.normal(size=(d, d)) * 0.1
        dH, slope = rng.normal(size=(T, d)), rng.uniform(size=(T, d))
        out[f"elman_scan T={T} d={d}"] = lambda k, xw=xw, wh=wh: k.elman_scan(xw, wh)
        out[f"elman_scan_backward T={T} d={d}"] = (
            lambda k, dH=dH, slope=slope, wh=wh: k.elman_scan_backward(dH, slope, wh))
    a, b = rng.normal(size=50), rng.normal(size=50)
    X = rng.normal(size=(1000, 32))
    return {
        **out,
        "kendall_counts n=50": lambda k: k.kendall_counts(a, b),
        "nearest_distances n=1000 d=32": lambda k: k.nearest_distances(X),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write results to this file")
    args = ap.parse_args(argv)

    try:
        compiled = kernels.backend_module("compiled")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return 1
    python = kernels.backend_module("python")

    results = []
    print(f"{'kernel':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        for label, mod in (("python", python), ("compiled", compiled)):
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            row[label] = min(timer.repeat(args.repeat, number)) / number * 1e3
        row["speedup"] = row["python"] / row["compiled"]
        results.append(row)
        print(f"{name:34s} {row['python']:10.3f} {row['compiled']:12.3f} {row['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
