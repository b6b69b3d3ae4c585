"""Sparse operator entry points over IR layer records."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DTYPE, GroupedTensor, as_activation
from ..ir import Conv1x1SparseIR, DwSparseIR, dw_tap_table
from ..patterns import DW_DENSE_CODE
from .backend import get_backend
from .tiling import TileConfig, solve_tile_config


@dataclass
class Counters:
    macs: int = 0
    loads: int = 0

    def add(self, macs: int = 0, loads: int = 0):
        self.macs += int(macs)
        self.loads += int(loads)


def _as_rows(x: np.ndarray, layer: Conv1x1SparseIR) -> np.ndarray:
    """Input as an ``(M, padded ic)`` matrix, striding and flattening as the layer needs."""
    n = x.shape[0]
    if layer.flatten:
        m = x.reshape(n, -1)
    else:
        if layer.stride > 1:
            x = x[:, ::layer.stride, ::layer.stride, :]
        m = x.reshape(-1, x.shape[3])
    icp = layer.cols * 4
    if m.shape[1] != icp:
        padded = np.zeros((m.shape[0], icp), dtype=DTYPE)
        padded[:, :m.shape[1]] = m
        m = padded
    return np.ascontiguousarray(m, dtype=DTYPE)


def _bias_padded(bias: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=DTYPE)
    out[:bias.size] = bias
    return out


def default_tile(layer: Conv1x1SparseIR, M: int = 1, R: int = 32) -> TileConfig:
    return solve_tile_config(max(M, 1), layer.oc, layer.ic, R)


def sparse_conv1x1(x, layer: Conv1x1SparseIR, tile: TileConfig | None = None, *,
                   threads: int = 1, counters: Counters | None = None, backend=None) -> np.ndarray:
    """Block-sparse 1x1 convolution (or FC) visiting only the blocks listed in SD."""
    x = as_activation(x)
    if x.shape[1:] != tuple(layer.in_shape[1:]):
        raise ValueError(f"layer {layer.name!r}: input shape {x.shape} != declared {layer.in_shape}")
    if layer.sd_idx.size and int(layer.sd_idx.max()) >= layer.cols:
        raise ValueError(f"layer {layer.name!r}: SD index out of range")
    kern = get_backend(backend)
    rows = _as_rows(x, layer)
    tile = tile or default_tile(layer, rows.shape[0])
    ocp = layer.rows * 4
    out = np.empty((rows.shape[0], ocp), dtype=DTYPE)
    macs = kern.conv1x1_sparse(rows, np.ascontiguousarray(layer.sd_ptr, dtype=np.uint32),
                               np.ascontiguousarray(layer.sd_idx, dtype=np.uint32),
                               np.ascontiguousarray(layer.packed, dtype=DTYPE),
                               _bias_padded(layer.bias, ocp), out, tile.mp, layer.act, threads)
    if counters is not None:
        counters.add(macs=macs)
    n, oh, ow, oc = layer.out_shape
    return np.ascontiguousarray(out[:, :oc]).reshape(x.shape[0], oh, ow, oc)


def dense_blocks(w2d: np.ndarray) -> np.ndarray:
    """All 4x4 blocks of an ``(oc, ic)`` matrix in ``[row][col][in][out]`` order."""
    oc, ic = w2d.shape
    rows, cols = -(-oc // 4), -(-ic // 4)
    padded = np.zeros((rows * 4, cols * 4), dtype=DTYPE)
    padded[:oc, :ic] = w2d
    return np.ascontiguousarray(padded.reshape(rows, 4, cols, 4).transpose(0, 2, 3, 1)).reshape(-1)


def dense_conv1x1_tiled(x, w2d: np.ndarray, bias: np.ndarray, tile: TileConfig | None = None, *,
                        act: int = 0, threads: int = 1, counters: Counters | None = None,
                        backend=None, blocks: np.ndarray | None = None) -> np.ndarray:
    """Dense 1x1 convolution through the same tiled kernel family (the benchmark baseline)."""
    x = as_activation(x)
    n, h, w, c = x.shape
    oc, ic = w2d.shape
    if c != ic:
        raise ValueError(f"input has {c} channels, weight expects {ic}")
    kern = get_backend(backend)
    icp, ocp = -(-ic // 4) * 4, -(-oc // 4) * 4
    rows = x.reshape(-1, c)
    if icp != ic:
        rows = np.concatenate([rows, np.zeros((rows.shape[0], icp - ic), DTYPE)], axis=1)
    rows = np.ascontiguousarray(rows)
    tile = tile or solve_tile_config(rows.shape[0], oc, ic)
    out = np.empty((rows.shape[0], ocp), dtype=DTYPE)
    if blocks is None:
        blocks = dense_blocks(w2d)
    macs = kern.conv1x1_dense(rows, blocks, _bias_padded(bias, ocp), out, tile.mp, act, threads)
    if counters is not None:
        counters.add(macs=macs)
    return np.ascontiguousarray(out[:, :oc]).reshape(n, h, w, oc)


def pad_grouped(t: GroupedTensor, pad: int, extra_w: int = 0) -> tuple[np.ndarray, int, int]:
    """Zero-pad every group slab spatially; returns ``(data (n, cp*hp*wp), hp, wp)``."""
    n, h, w, _ = t.shape
    hp, wp = h + 2 * pad, w + 2 * pad + extra_w
    cp = t.grouping.padded
    out = np.zeros((n, cp * hp * wp), dtype=DTYPE)
    for b in range(n):
        for i, (s, gw) in enumerate(zip(t.grouping.starts, t.grouping.groups)):
            dst = out[b, s * hp * wp:(s + gw) * hp * wp].reshape(hp, wp, gw)
            dst[pad:pad + h, pad:pad + w] = t.group(b, i)
    return out, hp, wp


def dw_out_size(h: int, w: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1


def run_dw_kernel(t: GroupedTensor, taps: np.ndarray, bias: np.ndarray, codes, masks,
                  stride: int, pad: int, act: int = 0, *, threads: int = 1,
                  counters: Counters | None = None, backend=None) -> GroupedTensor:
    """Shared driver for the pattern-dispatch and generic-mask depthwise kernels."""
    kern = get_backend(backend)
    n, h, w, c = t.shape
    oh, ow = dw_out_size(h, w, stride, pad)
    need_w = (ow + (ow & 1) - 1) * stride + 3
    extra = max(0, need_w - (w + 2 * pad))
    data, hp, wp = pad_grouped(t, pad, extra)
    g = t.grouping
    starts = np.asarray(g.starts, dtype=np.intc)
    widths = np.asarray(g.groups, dtype=np.intc)
    codes = np.asarray(codes, dtype=np.intc)
    masks = np.ascontiguousarray(masks, dtype=np.intc).reshape(len(g.groups), 3)
    taps = np.ascontiguousarray(taps, dtype=DTYPE)
    bias = _bias_padded(bias, g.padded)
    out = np.empty((n, g.padded * oh * ow), dtype=DTYPE)
    for b in range(n):
        macs, loads = kern.dw_conv(data[b], hp, wp, starts, widths, masks, codes, taps, bias,
                                   out[b], oh, ow, stride, act, threads)
        if counters is not None:
            counters.add(macs, loads)
    return GroupedTensor(out, (n, oh, ow, c), g)


def sparse_dwconv3x3(t: GroupedTensor, layer: DwSparseIR, stride: int | None = None,
                     pad: int | None = None, *, threads: int = 1,
                     counters: Counters | None = None, backend=None,
                     taps: np.ndarray | None = None) -> GroupedTensor:
    """Pattern-sparse depthwise 3x3; each channel group runs the kernel of its code."""
    stride = layer.stride if stride is None else stride
    pad = layer.pad if pad is None else pad
    if t.grouping != layer.grouping:
        raise ValueError(f"layer {layer.name!r}: input grouping {t.grouping.groups} does not match "
                         f"layer grouping {layer.grouping.groups}")
    if any(not 0 <= c <= DW_DENSE_CODE for c in layer.codes):
        raise ValueError(f"layer {layer.name!r}: pattern code out of range")
    if taps is None:
        taps = dw_tap_table(layer).T
    masks = np.zeros((len(layer.codes), 3), dtype=np.intc)
    return run_dw_kernel(t, taps, layer.bias, layer.codes, masks, stride, pad, layer.act,
                         threads=threads, counters=counters, backend=backend)


def dwconv3x3_rowmask(t: GroupedTensor, weight: np.ndarray, bias: np.ndarray, row_masks,
                      stride: int = 1, pad: int = 1, act: int = 0, *, threads: int = 1,
                      counters: Counters | None = None, backend=None) -> GroupedTensor:
    """Depthwise 3x3 with arbitrary per-group kept-column bitmasks (3 rows per group).

    Used to compare 3:9 patterns against other column-sparsity layouts, such
    as pruning the middle column.
    """
    g = t.grouping
    c = g.total
    w = np.asarray(weight, dtype=DTYPE).reshape(c, 9)
    taps = np.zeros((9, g.padded), dtype=DTYPE)
    taps[:, :c] = w.T
    codes = np.full(len(g.groups), -1, dtype=np.intc)
    return run_dw_kernel(t, taps, bias, codes, row_masks, stride, pad, act,
                         threads=threads, counters=counters, backend=backend)
