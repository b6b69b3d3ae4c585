import numpy as np
import pytest

from sbnn.core import pack_grouped, partition_channels, unpack_grouped
from sbnn.engine import (
    Counters, available_backends, backend_name, dense_conv1x1_tiled, dwconv3x3_rowmask,
    flop_count, get_backend, plan_model, register_count, run_model, run_reference,
    solve_tile_config, sparse_conv1x1, sparse_dwconv3x3,
)
from sbnn.engine import reference as ref
from sbnn.engine.tiling import access_volume
from sbnn.ir import Conv1x1SparseIR, DwSparseIR, convert, pack_conv1x1, pack_dw
from sbnn.model import mobilenet_v1
from sbnn.pruner import (
    PruneConfig, apply_mask, conv1x1_connectivity_prune, dw_pattern_prune, network_prune,
)

from conftest import chain_model, rel_err


# --- the reference operators against naive loops ---------------------------

def _naive_conv(x, w, b, stride, pad, depthwise=False):
    n, h, wd, c = x.shape
    oc, kh, kw, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, oh, ow, oc))
    for b_ in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(oc):
                    win = xp[b_, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    if depthwise:
                        y[b_, i, j, o] = (win[:, :, o] * w[o, :, :, 0]).sum()
                    else:
                        y[b_, i, j, o] = (win * w[o]).sum()
    return y + b


def test_reference_conv2d_naive(rng):
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for s, p in ((1, 1), (2, 1), (1, 0), (2, 0)):
        assert rel_err(ref.conv2d(x, w, b, s, p), _naive_conv(x, w, b, s, p)) < 1e-6


def test_reference_dwconv_naive(rng):
    x = rng.standard_normal((1, 7, 5, 6))
    w = rng.standard_normal((6, 3, 3, 1))
    b = rng.standard_normal(6)
    for s in (1, 2):
        assert rel_err(ref.dwconv(x, w, b, s, 1), _naive_conv(x, w, b, s, 1, depthwise=True)) < 1e-6


def test_reference_misc(rng):
    x = rng.standard_normal((1, 4, 4, 3)).astype(np.float32)
    np.testing.assert_allclose(ref.pool(x, (4, 4), 4), x.mean(axis=(1, 2), keepdims=True), rtol=1e-6)
    np.testing.assert_allclose(ref.relu6(x * 10), np.clip(x * 10, 0, 6))
    s = ref.softmax(x)
    np.testing.assert_allclose(s.sum(-1), 1, rtol=1e-6)
    w = rng.standard_normal((5, 1, 1, 48))
    np.testing.assert_allclose(ref.fc(x, w).reshape(-1), w[:, 0, 0, :] @ x.reshape(-1), rtol=1e-5)


# --- tiling ------------------------------------------------------------------

def test_tile_solver():
    t = solve_tile_config(3136, 128, 128, R=32)
    assert (t.mp, t.np, t.registers_used) == (20, 4, 29)
    assert solve_tile_config(49, 1024, 1024, R=16).mp == 8
    assert solve_tile_config(1, 1, 1, R=9).mp == 4
    assert register_count(20, 4) == 29
    with pytest.raises(ValueError):
        solve_tile_config(10, 10, 10, R=8)


def test_tile_solver_is_feasible_optimum():
    # brute force: among 4-aligned feasible mp the chosen one minimizes access volume
    for R in (12, 16, 24, 32, 48):
        best = min((mp for mp in range(4, 65, 4) if register_count(mp, 4) <= R),
                   key=lambda mp: (access_volume(3136, 128, 128, mp, 4), -mp))
        assert solve_tile_config(3136, 128, 128, R).mp == best


# --- kernels against the oracle ----------------------------------------------

def _c1_layer(rng, h, ic, oc, rho, stride=1):
    w = rng.standard_normal((oc, 1, 1, ic)).astype(np.float32)
    m = conv1x1_connectivity_prune(w, 4, 4, rho)
    ptr, idx, packed = pack_conv1x1(w[:, 0, 0, :], m.keep)
    oh = -(-h // stride)
    layer = Conv1x1SparseIR("c", (1, h, h, ic), (1, oh, oh, oc), oc, ic, ptr, idx, packed,
                            rng.standard_normal(oc).astype(np.float32), stride=stride)
    return layer, apply_mask(w, m)


@pytest.mark.parametrize("h,ic,oc,rho,stride", [
    (7, 16, 16, 0.3, 1), (5, 13, 10, 0.5, 1), (9, 32, 24, 0.0, 2), (3, 8, 8, 1.0, 1),
    (14, 64, 32, 0.7, 1),
])
def test_sparse_conv1x1_matches_reference(backend, rng, h, ic, oc, rho, stride):
    layer, wm = _c1_layer(rng, h, ic, oc, rho, stride)
    x = rng.standard_normal((1, h, h, ic)).astype(np.float32)
    for act in (0, 1, 2):
        layer.act = act
        y = sparse_conv1x1(x, layer, backend=backend)
        assert rel_err(y, ref.conv1x1(x, wm, layer.bias, stride, act)) <= 1e-5


def test_mac_counter_is_exact(backend, rng):
    layer, _ = _c1_layer(rng, 8, 160, 160, 0.3)
    x = rng.standard_normal((1, 8, 8, 160)).astype(np.float32)
    c = Counters()
    sparse_conv1x1(x, layer, counters=c, backend=backend)
    assert c.macs == 0.7 * 64 * 160 * 160
    d = Counters()
    dense_conv1x1_tiled(x, rng.standard_normal((160, 160)).astype(np.float32),
                        np.zeros(160, np.float32), counters=d, backend=backend)
    assert d.macs == 64 * 160 * 160


def test_dense_tiled_matches_reference(backend, rng):
    x = rng.standard_normal((2, 5, 5, 18)).astype(np.float32)
    w = rng.standard_normal((22, 18)).astype(np.float32)
    b = rng.standard_normal(22).astype(np.float32)
    y = dense_conv1x1_tiled(x, w, b, act=2, backend=backend)
    assert rel_err(y, ref.conv1x1(x, w.reshape(22, 1, 1, 18), b, 1, 2)) <= 1e-5


def _dw_layer(rng, h, w, c, stride, dense_groups=0):
    wt = rng.standard_normal((c, 3, 3, 1)).astype(np.float32)
    codes = dw_pattern_prune(wt, dense_groups=dense_groups)
    oh, ow = (h - 1) // stride + 1, (w - 1) // stride + 1
    layer = DwSparseIR("d", (1, h, w, c), (1, oh, ow, c), codes.grouping, codes.codes,
                       pack_dw(wt, codes.grouping, codes.codes),
                       rng.standard_normal(c).astype(np.float32), stride=stride)
    return layer, apply_mask(wt, codes)


@pytest.mark.parametrize("h,w,c,stride,dense", [
    (8, 8, 16, 1, 0), (7, 5, 24, 1, 1), (9, 9, 28, 2, 0), (6, 7, 3, 2, 1), (1, 1, 20, 1, 0),
    (2, 3, 36, 2, 2),
])
def test_sparse_dw_matches_reference(backend, rng, h, w, c, stride, dense):
    layer, wm = _dw_layer(rng, h, w, c, stride, dense)
    x = rng.standard_normal((1, h, w, c)).astype(np.float32)
    for act in (0, 2):
        layer.act = act
        g = sparse_dwconv3x3(pack_grouped(x, layer.grouping), layer, backend=backend)
        assert rel_err(unpack_grouped(g), ref.dwconv(x, wm, layer.bias, stride, 1, act)) <= 1e-5


def test_dw_counters(backend, rng):
    layer, _ = _dw_layer(rng, 8, 8, 32, 1)
    x = pack_grouped(rng.standard_normal((1, 8, 8, 32)).astype(np.float32), layer.grouping)
    c = Counters()
    sparse_dwconv3x3(x, layer, counters=c, backend=backend)
    assert c.macs == 8 * 8 * 32 * 6
    # 3:9 rows reuse the centre column across the two output pixels: 3 loads per row per pair
    assert c.loads == 2 * 8 * 4 * 3 * 3


def test_rowmask_middle_pruned(backend, rng):
    c, h = 16, 8
    x = rng.standard_normal((1, h, h, c)).astype(np.float32)
    w = rng.standard_normal((c, 3, 3, 1)).astype(np.float32)
    wm = w.copy()
    wm[:, :, 1, :] = 0
    g = partition_channels(c)
    cnt = Counters()
    y = dwconv3x3_rowmask(pack_grouped(x, g), w, np.zeros(c, np.float32), [[5, 5, 5]],
                          counters=cnt, backend=backend)
    assert rel_err(unpack_grouped(y), ref.dwconv(x, wm, None, 1, 1)) <= 1e-5
    assert cnt.loads == h * (h // 2) * 3 * 4


def test_thread_count_is_bitwise_stable(rng):
    if "cython" not in available_backends():
        pytest.skip("compiled backend not built")
    layer, _ = _c1_layer(rng, 14, 64, 64, 0.3)
    x = rng.standard_normal((1, 14, 14, 64)).astype(np.float32)
    a = sparse_conv1x1(x, layer, threads=1, backend="cython")
    b = sparse_conv1x1(x, layer, threads=4, backend="cython")
    np.testing.assert_array_equal(a, b)
    dw, _ = _dw_layer(rng, 15, 13, 56, 2, 1)
    xg = pack_grouped(rng.standard_normal((1, 15, 13, 56)).astype(np.float32), dw.grouping)
    a = sparse_dwconv3x3(xg, dw, threads=1, backend="cython")
    b = sparse_dwconv3x3(xg, dw, threads=4, backend="cython")
    np.testing.assert_array_equal(a.data, b.data)


def test_backends_agree(rng):
    if len(available_backends()) < 2:
        pytest.skip("only one backend")
    layer, _ = _c1_layer(rng, 9, 40, 36, 0.4)
    x = rng.standard_normal((1, 9, 9, 40)).astype(np.float32)
    assert rel_err(sparse_conv1x1(x, layer, backend="cython"),
                   sparse_conv1x1(x, layer, backend="python")) <= 1e-6


def test_backend_selection(monkeypatch):
    assert backend_name(get_backend("python")) == "python"
    monkeypatch.setenv("SBNN_BACKEND", "python")
    assert backend_name(get_backend()) == "python"
    with pytest.raises(ValueError):
        get_backend("fortran")


def test_kernel_input_checks(backend, rng):
    layer, _ = _c1_layer(rng, 4, 8, 8, 0.0)
    with pytest.raises(ValueError):
        sparse_conv1x1(np.zeros((1, 4, 4, 9), np.float32), layer, backend=backend)
    layer.sd_idx = layer.sd_idx.copy()
    layer.sd_idx[0] = 99
    with pytest.raises(ValueError, match="out of range"):
        sparse_conv1x1(np.zeros((1, 4, 4, 8), np.float32), layer, backend=backend)


# --- executor -----------------------------------------------------------------

def test_run_model_chain(backend, rng):
    model = chain_model(rng)
    masks, _ = network_prune(model, PruneConfig(conv1x1_rho=0.4, enabled={"conv1x1", "dwconv", "fc"}))
    ir = convert(model, masks)
    x = rng.standard_normal(model.input_shape).astype(np.float32)
    plan = plan_model(ir, backend=backend)
    assert rel_err(run_model(ir, x, plan), run_reference(ir, x)) <= 1e-5


def test_run_model_mobilenet_small(backend, rng):
    model = mobilenet_v1(resolution=32, width=0.25, num_classes=10)
    model.layers = model.layers[:-1]  # compare logits, not the flat softmax
    masks, _ = network_prune(model, PruneConfig(conv1x1_rho=0.3))
    ir = convert(model, masks)
    x = rng.standard_normal(model.input_shape).astype(np.float32)
    counters = Counters()
    y = run_model(ir, x, plan_model(ir, backend=backend), counters)
    assert rel_err(y, run_reference(ir, x)) <= 1e-4
    kinds = {v["kernel"] for v in plan_model(ir).summary()}
    assert {"conv1x1_sparse", "dw_pattern", "reference"} <= kinds


def test_flop_count_mobilenet():
    fc = flop_count(convert(mobilenet_v1()))
    assert abs(fc["dense_macs"] - 568e6) / 568e6 <= 0.02
    assert fc["effective_macs"] == fc["dense_macs"]


def test_run_model_rejects_wrong_input(rng):
    ir = convert(chain_model(rng))
    with pytest.raises(ValueError, match="input shape"):
        run_model(ir, np.zeros((1, 3, 3, 8), np.float32))
