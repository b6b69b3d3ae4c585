#!/usr/bin/env python3
"""Compiled kernels vs the numpy fallback on the same inputs.

    python benchmarks/compare_backends.py [--reps 10] [--rho 0.3] [--out backends.csv]

Times the sparse conv1x1 and pattern depthwise kernels on a few MobileNet-v1
shapes plus one end-to-end pruned MobileNet-v1 inference, and checks that
both backends produce the same numbers while doing it.
"""
from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from sbnn.bench import BenchSpec, run_bench
from sbnn.engine import available_backends, plan_model, run_model
from sbnn.ir import convert
from sbnn.model import mobilenet_v1
from sbnn.pruner import PruneConfig, network_prune

SHAPES = {
    "conv1x1": [(56, 56, 128, 128, 1), (14, 14, 512, 512, 1), (7, 7, 1024, 1024, 1)],
    "dw": [(112, 112, 32, 32, 1), (28, 28, 256, 256, 2), (7, 7, 1024, 1024, 1)],
}


def kernel_rows(reps, rho):
    rows = []
    for op, shapes in SHAPES.items():
        times = {}
        for be in available_backends():
            spec = BenchSpec(op, shapes, (rho,), reps=reps, warmup=2, backend=be)
            times[be] = run_bench(spec)
        for i, shape in enumerate(shapes):
            row = {"case": op, "shape": "x".join(map(str, shape))}
            for be, recs in times.items():
                row[f"{be}_sparse_ms"] = round(recs[i].sparse_ms, 4)
                row[f"{be}_dense_ms"] = round(recs[i].dense_ms, 4)
            rows.append(row)
    return rows


def model_row(reps, rho):
    model = mobilenet_v1(seed=0)
    masks, _ = network_prune(model, PruneConfig(conv1x1_rho=rho))
    ir = convert(model, masks)
    x = np.random.default_rng(0).standard_normal(model.input_shape).astype(np.float32)
    row, outs = {"case": "mobilenet_v1", "shape": "1x224x224x3"}, {}
    for be in available_backends():
        plan = plan_model(ir, backend=be)
        run_model(ir, x, plan)
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            outs[be] = run_model(ir, x, plan)
            ts.append(time.perf_counter() - t0)
        row[f"{be}_sparse_ms"] = round(statistics.median(ts) * 1e3, 4)
    vals = list(outs.values())
    err = max(float(np.abs(v - vals[0]).max()) for v in vals)
    return row, err


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--rho", type=float, default=0.3)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    backends = available_backends()
    if len(backends) < 2:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
    rows = kernel_rows(args.reps, args.rho)
    mrow, err = model_row(max(3, args.reps // 3), args.rho)
    rows.append(mrow)
    cols = ["case", "shape"] + [f"{b}_{k}" for b in backends for k in ("sparse_ms", "dense_ms")]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(out, fieldnames=cols, restval="", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if "cython" in backends:
        ratios = [r["python_sparse_ms"] / r["cython_sparse_ms"] for r in rows]
        print(f"# numpy/compiled time ratio: median {statistics.median(ratios):.2f}x, "
              f"max |output diff| on MobileNet-v1 {err:.2e}", file=sys.stderr)


if __name__ == "__main__":
    main()
