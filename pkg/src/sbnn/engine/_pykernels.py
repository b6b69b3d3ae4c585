"""numpy implementations of the compiled kernels, used when the extension is absent.

Signatures and counters match ``_ckernels``.  Work is vectorized per block
row (1x1) or per kept tap (depthwise) instead of per register tile, so
``mp`` only affects validation here.
"""
from __future__ import annotations

import numpy as np

MAX_MP = 64
MAX_LANES = 16


def _act(y: np.ndarray, act: int) -> np.ndarray:
    if act == 1:
        return np.maximum(y, 0, out=y)
    if act == 2:
        return np.clip(y, 0, 6, out=y)
    return y


def conv1x1_sparse(x, sd_ptr, sd_idx, packed, bias, out, mp, act=0, nthreads=1):
    M, icp = x.shape
    rows = sd_ptr.shape[0] - 1
    if not 1 <= mp <= MAX_MP:
        raise ValueError(f"tile height must be in [1, {MAX_MP}]")
    if out.shape != (M, rows * 4) or bias.shape[0] != rows * 4:
        raise ValueError("output/bias shape does not match the SD row count")
    if icp % 4:
        raise ValueError("input width must be a multiple of 4")
    x3 = x.reshape(M, icp // 4, 4)
    macs = 0
    for j in range(rows):
        a, b = int(sd_ptr[j]), int(sd_ptr[j + 1])
        y = np.broadcast_to(bias[j * 4:(j + 1) * 4], (M, 4)).copy()
        if b > a:
            xs = x3[:, sd_idx[a:b].astype(np.intp), :].reshape(M, -1)
            y += xs @ packed[a * 16:b * 16].reshape(-1, 4)
        out[:, j * 4:(j + 1) * 4] = _act(y, act)
        macs += M * (b - a) * 16
    return macs


def conv1x1_dense(x, blocks, bias, out, mp, act=0, nthreads=1):
    M, icp = x.shape
    cols, rows = icp // 4, out.shape[1] // 4
    if not 1 <= mp <= MAX_MP:
        raise ValueError(f"tile height must be in [1, {MAX_MP}]")
    if blocks.shape[0] != rows * cols * 16 or bias.shape[0] != rows * 4:
        raise ValueError("weight/bias size does not match the block grid")
    w = blocks.reshape(rows, cols, 4, 4).transpose(1, 2, 0, 3).reshape(icp, rows * 4)
    out[:] = _act(x @ w + bias, act)
    return M * rows * cols * 16


def _code_masks(code: int) -> tuple[int, int, int]:
    if code == 8:
        return (7, 7, 7)
    return tuple(3 if (code >> r) & 1 else 6 for r in range(3))


def dw_row_loads(masks, stride: int) -> tuple[int, int]:
    """(vector loads, MACs per lane per output) of one two-pixel step, summed over rows."""
    loads = 0
    for m in masks:
        for d in range(stride + 3):
            k1 = d - stride
            use0 = d <= 2 and (m >> d) & 1
            use1 = 0 <= k1 <= 2 and (m >> k1) & 1
            loads += bool(use0 or use1)
    taps = sum(bin(m).count("1") for m in masks)
    return loads, taps


def dw_conv(x, hp, wp, starts, widths, masks, codes, taps, bias, out, oh, ow, stride,
            act=0, nthreads=1):
    ngroups = starts.shape[0]
    cp = taps.shape[1]
    if taps.shape[0] != 9 or bias.shape[0] != cp:
        raise ValueError("tap table must be (9, padded channels) with matching bias")
    if masks.shape[0] != ngroups or codes.shape[0] != ngroups or widths.shape[0] != ngroups:
        raise ValueError("per-group arrays disagree on the group count")
    if x.shape[0] != cp * hp * wp or out.shape[0] != cp * oh * ow:
        raise ValueError("input/output buffer sizes do not match the grouping")
    if stride < 1 or (oh - 1) * stride + 3 > hp or (ow + (ow & 1) - 1) * stride + 3 > wp:
        raise ValueError("padded input is too small for the requested output")
    pairs = (ow + 1) // 2
    macs = loads = 0
    for g in range(ngroups):
        s0, gw, code = int(starts[g]), int(widths[g]), int(codes[g])
        if not 1 <= gw <= MAX_LANES or code > 8:
            raise ValueError("bad group width or pattern code")
        m = _code_masks(code) if code >= 0 else tuple(int(v) for v in masks[g])
        slab = x[s0 * hp * wp:(s0 + gw) * hp * wp].reshape(hp, wp, gw)
        y = np.broadcast_to(bias[s0:s0 + gw], (oh, ow, gw)).copy()
        for r in range(3):
            for q in range(3):
                if (m[r] >> q) & 1:
                    win = slab[r:r + stride * (oh - 1) + 1:stride, q:q + stride * (ow - 1) + 1:stride]
                    y += win * taps[r * 3 + q, s0:s0 + gw]
        out[s0 * oh * ow:(s0 + gw) * oh * ow] = _act(y, act).reshape(-1)
        step_loads, ntaps = dw_row_loads(m, stride)
        loads += oh * pairs * step_loads
        macs += oh * ow * ntaps * gw
    return macs, loads
