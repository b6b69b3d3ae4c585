import itertools

import numpy as np
import pytest

from sbnn.engine import available_backends
from sbnn.model import Layer, Model


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(), 1e-30)
    return float(np.abs(a - b).max() / scale)


def brute_force_block_optimum(w2d, go, gi, rho):
    """Best retained l1 over every block subset of the right size."""
    oc, ic = w2d.shape
    a = np.abs(w2d.astype(np.float64))
    scores = [a[r:r + go, c:c + gi].sum() for r in range(0, oc, go) for c in range(0, ic, gi)]
    n_rm = int(np.floor(len(scores) * rho + 1e-9))
    best = -1.0
    for removed in itertools.combinations(range(len(scores)), n_rm):
        best = max(best, sum(scores) - sum(scores[i] for i in removed))
    return best


def chain_model(rng, h=6, w=6, c=(8, 8, 12, 8, 10)):
    """conv1x1 -> dwconv -> relu -> conv1x1 -> fc chain with random weights."""
    c0, c1, c2, c3, nc = c
    layers = [
        Layer("pw0", "conv1x1", (1, h, w, c0), (1, h, w, c1)),
        Layer("dw", "dwconv", (1, h, w, c1), (1, h, w, c1), stride=1, pad=1, kernel=(3, 3)),
        Layer("act", "relu", (1, h, w, c1), (1, h, w, c1)),
        Layer("pw1", "conv1x1", (1, h, w, c1), (1, h, w, c2)),
        Layer("pw2", "conv1x1", (1, h, w, c2), (1, h, w, c3)),
        Layer("fc", "fc", (1, h, w, c3), (1, 1, 1, nc)),
    ]
    for layer in layers:
        ws = layer.weight_shape
        if ws is not None:
            layer.weight = rng.standard_normal(ws).astype(np.float32)
            layer.bias = rng.standard_normal(ws[0]).astype(np.float32)
    return Model(layers)


def random_ir(rng, max_layers=6):
    """Random valid chain of dense, block-sparse 1x1 and pattern-sparse depthwise records."""
    from sbnn.core import partition_channels
    from sbnn.ir import (
        Conv1x1SparseIR, DenseLayerIR, DwSparseIR, ModelIR, pack_conv1x1, pack_dw,
    )

    n = int(rng.integers(1, 3))
    h = w = int(rng.integers(1, 9))
    c = int(rng.integers(1, 40))
    layers = []
    for i in range(int(rng.integers(1, max_layers + 1))):
        kind = rng.choice(["c1", "dw", "conv", "relu", "fc"] if h * w > 1 else ["c1", "relu", "fc"])
        name = f"l{i}_{kind}"
        act = int(rng.integers(0, 3))
        if kind == "c1":
            oc = int(rng.integers(1, 40))
            keep = rng.random((-(-oc // 4), -(-c // 4))) < rng.random()
            ptr, idx, packed = pack_conv1x1(rng.standard_normal((oc, c)).astype(np.float32), keep)
            layers.append(Conv1x1SparseIR(name, (n, h, w, c), (n, h, w, oc), oc, c, ptr, idx,
                                          packed, rng.standard_normal(oc).astype(np.float32), act=act))
            c = oc
        elif kind == "dw":
            g = partition_channels(c)
            codes = tuple(int(x) for x in rng.integers(0, 9, len(g.groups)))
            s = int(rng.integers(1, 3))
            oh, ow = (h - 1) // s + 1, (w - 1) // s + 1
            packed = pack_dw(rng.standard_normal((c, 3, 3, 1)).astype(np.float32), g, codes)
            layers.append(DwSparseIR(name, (n, h, w, c), (n, oh, ow, c), g, codes, packed,
                                     rng.standard_normal(c).astype(np.float32), stride=s, act=act))
            h, w = oh, ow
        elif kind == "conv":
            oc = int(rng.integers(1, 20))
            layers.append(DenseLayerIR(name, "conv2d", (n, h, w, c), (n, h, w, oc), 1, 1, act, (3, 3),
                                       rng.standard_normal((oc, 3, 3, c)).astype(np.float32),
                                       rng.standard_normal(oc).astype(np.float32)))
            c = oc
        elif kind == "relu":
            layers.append(DenseLayerIR(name, "relu", (n, h, w, c), (n, h, w, c)))
        else:
            oc = int(rng.integers(1, 20))
            ic = h * w * c
            keep = rng.random((-(-oc // 4), -(-ic // 4))) < 0.6
            ptr, idx, packed = pack_conv1x1(rng.standard_normal((oc, ic)).astype(np.float32), keep)
            layers.append(Conv1x1SparseIR(name, (n, h, w, c), (n, 1, 1, oc), oc, ic, ptr, idx,
                                          packed, rng.standard_normal(oc).astype(np.float32)))
            h = w = 1
            c = oc
    return ModelIR(layers, "in", layers[-1].name)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
