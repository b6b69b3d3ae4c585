"""Operator benchmark: dense vs sparse median latency over a shape grid, as CSV.

Both sides of a comparison run through the same kernel family on buffers
prepared up front, so a timed call is one kernel invocation and nothing
else.  Within a shape, the dense variant and every sparsity level are timed
round-robin (one call each per repetition) so slow drift in machine state
lands on all of them equally.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, pack_grouped, partition_channels
from .engine.backend import get_backend
from .engine.ops import dense_blocks, dw_out_size, pad_grouped
from .engine.tiling import solve_tile_config
from .ir import pack_conv1x1, tap_count
from .patterns import DW_DENSE_CODE
from .pruner import conv1x1_connectivity_prune, dw_pattern_prune

CSV_COLUMNS = ("op", "h", "w", "ic", "oc", "stride", "sparsity", "dense_ms", "sparse_ms",
               "speedup", "dense_macs", "effective_macs")

# (h, w, ic, oc, stride) of the MobileNet-v1 pointwise and depthwise layers at 224x224
MOBILENET_CONV1X1 = (
    (112, 112, 32, 64, 1), (56, 56, 64, 128, 1), (56, 56, 128, 128, 1), (28, 28, 128, 256, 1),
    (28, 28, 256, 256, 1), (14, 14, 256, 512, 1), (14, 14, 512, 512, 1), (7, 7, 512, 1024, 1),
    (7, 7, 1024, 1024, 1),
)
MOBILENET_DW = (
    (112, 112, 32, 32, 1), (112, 112, 64, 64, 2), (56, 56, 128, 128, 1), (56, 56, 128, 128, 2),
    (28, 28, 256, 256, 1), (28, 28, 256, 256, 2), (14, 14, 512, 512, 1), (14, 14, 512, 512, 2),
    (7, 7, 1024, 1024, 1),
)
DEFAULT_SPARSITY = (0.0, 0.1, 0.3, 0.5)


@dataclass
class BenchSpec:
    op: str = "conv1x1"
    shapes: tuple = ()
    sparsities: tuple = DEFAULT_SPARSITY
    reps: int = 10
    warmup: int = 3
    seed: int = 0
    threads: int = 1
    backend: str = "auto"

    def __post_init__(self):
        if self.op not in ("conv1x1", "dw"):
            raise ValueError(f"unknown benchmark op {self.op!r} (expected conv1x1 or dw)")
        if not self.shapes:
            self.shapes = MOBILENET_CONV1X1 if self.op == "conv1x1" else MOBILENET_DW
        self.shapes = tuple(tuple(int(v) for v in s) for s in self.shapes)
        self.sparsities = tuple(float(s) for s in self.sparsities)
        if self.reps < 3:
            raise ValueError("reps must be >= 3")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        for s in self.shapes:
            if len(s) != 5 or min(s) <= 0:
                raise ValueError(f"shape {s} must be five positive ints (h, w, ic, oc, stride)")
            if self.op == "dw" and s[2] != s[3]:
                raise ValueError(f"depthwise shape {s} needs ic == oc")
        if not self.sparsities or any(not 0.0 <= r <= 1.0 for r in self.sparsities):
            raise ValueError("sparsities must be a non-empty list in [0, 1]")


@dataclass
class BenchRecord:
    op: str
    h: int
    w: int
    ic: int
    oc: int
    stride: int
    sparsity: float
    dense_ms: float
    sparse_ms: float
    dense_macs: int
    effective_macs: int
    samples: dict = field(default_factory=dict, repr=False)

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.sparse_ms - 1.0

    def row(self) -> dict:
        return {"op": self.op, "h": self.h, "w": self.w, "ic": self.ic, "oc": self.oc,
                "stride": self.stride, "sparsity": f"{self.sparsity:.4f}",
                "dense_ms": f"{self.dense_ms:.6f}", "sparse_ms": f"{self.sparse_ms:.6f}",
                "speedup": f"{self.speedup:.6f}", "dense_macs": self.dense_macs,
                "effective_macs": self.effective_macs}


def median_ms(samples) -> float:
    return statistics.median(samples) * 1e3


def time_round_robin(fns: list, reps: int, warmup: int) -> list[list[float]]:
    """Seconds per call for each function, interleaving the calls rep by rep."""
    for _ in range(warmup):
        for f in fns:
            f()
    out = [[] for _ in fns]
    clock = time.perf_counter
    for _ in range(reps):
        for i, f in enumerate(fns):
            t0 = clock()
            f()
            out[i].append(clock() - t0)
    return out


def _conv1x1_case(shape, sparsities, rng, kern, threads):
    h, w, ic, oc, stride = shape
    oh, ow = -(-h // stride), -(-w // stride)
    M = oh * ow
    icp, ocp = -(-ic // 4) * 4, -(-oc // 4) * 4
    x = np.zeros((M, icp), dtype=DTYPE)
    x[:, :ic] = rng.standard_normal((M, ic))
    wt = rng.standard_normal((oc, 1, 1, ic)).astype(DTYPE)
    bias = np.zeros(ocp, dtype=DTYPE)
    out = np.empty((M, ocp), dtype=DTYPE)
    mp = solve_tile_config(M, oc, ic).mp
    blocks = dense_blocks(wt.reshape(oc, ic))
    dense_macs = M * oc * ic

    fns = [lambda: kern.conv1x1_dense(x, blocks, bias, out, mp, 0, threads)]
    effective = []
    for rho in sparsities:
        mask = conv1x1_connectivity_prune(wt, 4, 4, rho)
        ptr, idx, packed = pack_conv1x1(wt.reshape(oc, ic), mask.keep)
        eff = 0
        for r in range(ptr.size - 1):
            rh = min(4, oc - 4 * r)
            eff += sum(rh * min(4, ic - 4 * int(k)) for k in idx[ptr[r]:ptr[r + 1]])
        effective.append(M * eff)
        fns.append(lambda p=ptr, i=idx, k=packed: kern.conv1x1_sparse(x, p, i, k, bias, out, mp, 0,
                                                                       threads))
    return fns, dense_macs, effective, list(sparsities)


def _dw_case(shape, sparsities, rng, kern, threads):
    h, w, c, _, stride = shape
    grouping = partition_channels(c)
    t = pack_grouped(rng.standard_normal((1, h, w, c)).astype(DTYPE), grouping)
    oh, ow = dw_out_size(h, w, stride, 1)
    need_w = (ow + (ow & 1) - 1) * stride + 3
    data, hp, wp = pad_grouped(t, 1, max(0, need_w - (w + 2)))
    x = data[0]
    wt = rng.standard_normal((c, 3, 3, 1)).astype(DTYPE)
    cp = grouping.padded
    taps = np.zeros((9, cp), dtype=DTYPE)
    taps[:, :c] = wt.reshape(c, 9).T
    bias = np.zeros(cp, dtype=DTYPE)
    out = np.empty(cp * oh * ow, dtype=DTYPE)
    starts = np.asarray(grouping.starts, dtype=np.intc)
    widths = np.asarray(grouping.groups, dtype=np.intc)
    masks = np.zeros((len(grouping.groups), 3), dtype=np.intc)
    ngroups = len(grouping.groups)

    def call(codes):
        return lambda: kern.dw_conv(x, hp, wp, starts, widths, masks, codes, taps, bias, out,
                                    oh, ow, stride, 0, threads)

    fns = [call(np.full(ngroups, DW_DENSE_CODE, dtype=np.intc))]
    effective, actual = [], []
    for rho in sparsities:
        # a 3:9 group removes 1/3 of its taps, so rho maps to a count of pattern groups
        n_pat = min(ngroups, int(round(3.0 * min(rho, 1 / 3) * ngroups)))
        codes = np.asarray(dw_pattern_prune(wt, 16, ngroups - n_pat).codes, dtype=np.intc)
        kept = sum(tap_count(int(k)) * int(widths[i]) for i, k in enumerate(codes))
        effective.append(oh * ow * kept)
        actual.append(1.0 - kept / (9 * c))
        fns.append(call(codes))
    return fns, oh * ow * c * 9, effective, actual


def run_bench(spec: BenchSpec) -> list[BenchRecord]:
    kern = get_backend(spec.backend)
    rng = np.random.default_rng(spec.seed)
    records = []
    for shape in spec.shapes:
        build = _conv1x1_case if spec.op == "conv1x1" else _dw_case
        fns, dense_macs, effective, levels = build(shape, spec.sparsities, rng, kern, spec.threads)
        samples = time_round_robin(fns, spec.reps, spec.warmup)
        dense_ms = median_ms(samples[0])
        for i, level in enumerate(levels):
            h, w, ic, oc, stride = shape
            records.append(BenchRecord(spec.op, h, w, ic, oc, stride, level, dense_ms,
                                       median_ms(samples[i + 1]), dense_macs, effective[i],
                                       samples={"dense": samples[0], "sparse": samples[i + 1]}))
    return records


def to_csv(records) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in records:
        wr.writerow(r.row())
    return buf.getvalue()


def parse_shapes(text: str) -> tuple:
    """``"56x56x128x128x1,7x7x1024x1024"`` -> shape tuples; stride defaults to 1."""
    shapes = []
    for part in text.split(","):
        vals = [int(v) for v in part.strip().lower().split("x")]
        if len(vals) == 4:
            vals.append(1)
        if len(vals) != 5:
            raise ValueError(f"bad shape {part!r}: expected HxWxICxOC[xSTRIDE]")
        shapes.append(tuple(vals))
    return tuple(shapes)
