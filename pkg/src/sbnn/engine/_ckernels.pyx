# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block-sparse 1x1 and pattern-dispatch depthwise kernels.

Every output element is produced by exactly one thread with a fixed
summation order, so results are bitwise identical at any thread count.
"""
from cython.parallel cimport prange
from libc.stdint cimport int64_t, uint32_t

cdef enum:
    MAX_MP = 64
    MAX_LANES = 16


cdef inline float _act(float v, int act) noexcept nogil:
    if act == 1:
        return v if v > 0 else 0
    if act == 2:
        if v < 0:
            return 0
        return 6 if v > 6 else v
    return v


cdef int64_t _c1_sparse_tile(const float* x, int ldx, const uint32_t* sd_ptr,
                             const uint32_t* sd_idx, const float* packed, const float* bias,
                             float* out, int ldo, int m0, int mm, int rows,
                             int act) noexcept nogil:
    cdef float acc[MAX_MP * 4]
    cdef int j, p, o
    cdef uint32_t t, k
    cdef const float* wb
    cdef const float* xp
    cdef float x0, x1, x2, x3
    cdef int64_t macs = 0
    for j in range(rows):
        for p in range(mm):
            for o in range(4):
                acc[p * 4 + o] = bias[j * 4 + o]
        for t in range(sd_ptr[j], sd_ptr[j + 1]):
            k = sd_idx[t]
            wb = packed + t * 16
            for p in range(mm):
                xp = x + (m0 + p) * ldx + k * 4
                x0 = xp[0]
                x1 = xp[1]
                x2 = xp[2]
                x3 = xp[3]
                for o in range(4):
                    acc[p * 4 + o] += x0 * wb[o] + x1 * wb[4 + o] + x2 * wb[8 + o] + x3 * wb[12 + o]
            macs += mm * 16
        for p in range(mm):
            for o in range(4):
                out[(m0 + p) * ldo + j * 4 + o] = _act(acc[p * 4 + o], act)
    return macs


cdef int64_t _c1_dense_tile(const float* x, int ldx, const float* blocks, int cols,
                            const float* bias, float* out, int ldo, int m0, int mm, int rows,
                            int act) noexcept nogil:
    cdef float acc[MAX_MP * 4]
    cdef int j, p, o, k
    cdef const float* wb
    cdef const float* xp
    cdef float x0, x1, x2, x3
    cdef int64_t macs = 0
    for j in range(rows):
        for p in range(mm):
            for o in range(4):
                acc[p * 4 + o] = bias[j * 4 + o]
        for k in range(cols):
            wb = blocks + (j * cols + k) * 16
            for p in range(mm):
                xp = x + (m0 + p) * ldx + k * 4
                x0 = xp[0]
                x1 = xp[1]
                x2 = xp[2]
                x3 = xp[3]
                for o in range(4):
                    acc[p * 4 + o] += x0 * wb[o] + x1 * wb[4 + o] + x2 * wb[8 + o] + x3 * wb[12 + o]
            macs += mm * 16
        for p in range(mm):
            for o in range(4):
                out[(m0 + p) * ldo + j * 4 + o] = _act(acc[p * 4 + o], act)
    return macs


def conv1x1_sparse(const float[:, ::1] x, const uint32_t[::1] sd_ptr, const uint32_t[::1] sd_idx,
                   const float[::1] packed, const float[::1] bias, float[:, ::1] out,
                   int mp, int act=0, int nthreads=1):
    """Block-sparse ``out = x @ W`` over ``mp``-row tiles; returns the MAC count."""
    cdef int M = x.shape[0]
    cdef int rows = sd_ptr.shape[0] - 1
    cdef int ntiles, ti, m0, mm
    cdef int64_t macs = 0
    if mp < 1 or mp > MAX_MP:
        raise ValueError(f"tile height must be in [1, {MAX_MP}]")
    if out.shape[0] != M or out.shape[1] != rows * 4 or bias.shape[0] != rows * 4:
        raise ValueError("output/bias shape does not match the SD row count")
    if x.shape[1] % 4:
        raise ValueError("input width must be a multiple of 4")
    if M == 0 or rows == 0:
        return 0
    ntiles = (M + mp - 1) // mp
    for ti in prange(ntiles, nogil=True, num_threads=nthreads, schedule="static"):
        m0 = ti * mp
        mm = mp if m0 + mp <= M else M - m0
        macs += _c1_sparse_tile(&x[0, 0], x.shape[1], &sd_ptr[0], &sd_idx[0] if sd_idx.shape[0] else NULL,
                                &packed[0] if packed.shape[0] else NULL, &bias[0], &out[0, 0],
                                out.shape[1], m0, mm, rows, act)
    return macs


def conv1x1_dense(const float[:, ::1] x, const float[::1] blocks, const float[::1] bias,
                  float[:, ::1] out, int mp, int act=0, int nthreads=1):
    """Dense tiled baseline: same tiling and block layout, every block present."""
    cdef int M = x.shape[0]
    cdef int cols = x.shape[1] // 4
    cdef int rows = out.shape[1] // 4
    cdef int ntiles, ti, m0, mm
    cdef int64_t macs = 0
    if mp < 1 or mp > MAX_MP:
        raise ValueError(f"tile height must be in [1, {MAX_MP}]")
    if blocks.shape[0] != rows * cols * 16 or bias.shape[0] != rows * 4:
        raise ValueError("weight/bias size does not match the block grid")
    if M == 0 or rows == 0 or cols == 0:
        return 0
    ntiles = (M + mp - 1) // mp
    for ti in prange(ntiles, nogil=True, num_threads=nthreads, schedule="static"):
        m0 = ti * mp
        mm = mp if m0 + mp <= M else M - m0
        macs += _c1_dense_tile(&x[0, 0], x.shape[1], &blocks[0], cols, &bias[0], &out[0, 0],
                               out.shape[1], m0, mm, rows, act)
    return macs


cdef inline int _popcount3(int m) noexcept nogil:
    return (m & 1) + ((m >> 1) & 1) + ((m >> 2) & 1)


cdef inline int64_t _dw_row(const float* xg, int wp, const float* taps, int ldt, int gw,
                            const float* bg, float* og, int ow, int oy, int s,
                            int m0, int m1, int m2, int act, int64_t* macs) noexcept nogil:
    # one output row of one channel group, two output pixels per step;
    # m0..m2 are the kept-column bitmasks of kernel rows 0..2
    cdef float acc0[MAX_LANES]
    cdef float acc1[MAX_LANES]
    cdef int ox, r, d, c, kc1, m, use0, use1, two
    cdef int ntaps = _popcount3(m0) + _popcount3(m1) + _popcount3(m2)
    cdef int64_t loads = 0
    cdef const float* xp
    cdef const float* wt
    for ox in range(0, ow, 2):
        two = ox + 1 < ow
        for c in range(gw):
            acc0[c] = bg[c]
            acc1[c] = bg[c]
        for r in range(3):
            m = m0 if r == 0 else (m1 if r == 1 else m2)
            for d in range(s + 3):
                kc1 = d - s
                use0 = d <= 2 and ((m >> d) & 1)
                use1 = kc1 >= 0 and kc1 <= 2 and ((m >> kc1) & 1)
                if not use0 and not use1:
                    continue
                xp = xg + ((oy * s + r) * wp + ox * s + d) * gw
                loads += 1
                if use0:
                    wt = taps + (r * 3 + d) * ldt
                    for c in range(gw):
                        acc0[c] += xp[c] * wt[c]
                if use1:
                    wt = taps + (r * 3 + kc1) * ldt
                    for c in range(gw):
                        acc1[c] += xp[c] * wt[c]
        for c in range(gw):
            og[(oy * ow + ox) * gw + c] = _act(acc0[c], act)
        if two:
            for c in range(gw):
                og[(oy * ow + ox + 1) * gw + c] = _act(acc1[c], act)
        macs[0] += ntaps * gw * (1 + two)
    return loads


cdef inline int64_t _dw_dispatch(int code, const float* xg, int wp, const float* taps, int ldt,
                                 int gw, const float* bg, float* og, int ow, int oy, int s,
                                 int act, int64_t* macs) noexcept nogil:
    # one specialization per pattern: bit r of code set -> row r keeps column 0
    if code == 0:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 6, 6, 6, act, macs)
    if code == 1:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 3, 6, 6, act, macs)
    if code == 2:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 6, 3, 6, act, macs)
    if code == 3:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 3, 3, 6, act, macs)
    if code == 4:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 6, 6, 3, act, macs)
    if code == 5:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 3, 6, 3, act, macs)
    if code == 6:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 6, 3, 3, act, macs)
    if code == 7:
        return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 3, 3, 3, act, macs)
    return _dw_row(xg, wp, taps, ldt, gw, bg, og, ow, oy, s, 7, 7, 7, act, macs)


def dw_conv(const float[::1] x, int hp, int wp, const int[::1] starts, const int[::1] widths,
            const int[:, ::1] masks, const int[::1] codes, const float[:, ::1] taps,
            const float[::1] bias, float[::1] out, int oh, int ow, int stride, int act=0,
            int nthreads=1):
    """Depthwise 3x3 over a padded channel-grouped input (one batch item).

    ``codes[g] >= 0`` selects the specialized kernel of pattern ``codes[g]``;
    ``codes[g] < 0`` runs the generic kernel with row masks ``masks[g]``.
    Returns ``(macs, input_vector_loads)``.
    """
    cdef int ngroups = starts.shape[0]
    cdef int cp = taps.shape[1]
    cdef int i, g, oy, s0, gw
    cdef int64_t loads = 0, macs = 0
    cdef int64_t mac_local
    if taps.shape[0] != 9 or bias.shape[0] != cp:
        raise ValueError("tap table must be (9, padded channels) with matching bias")
    if masks.shape[0] != ngroups or codes.shape[0] != ngroups or widths.shape[0] != ngroups:
        raise ValueError("per-group arrays disagree on the group count")
    if x.shape[0] != cp * hp * wp or out.shape[0] != cp * oh * ow:
        raise ValueError("input/output buffer sizes do not match the grouping")
    if stride < 1 or (oh - 1) * stride + 3 > hp or (ow + (ow & 1) - 1) * stride + 3 > wp:
        raise ValueError("padded input is too small for the requested output")
    for g in range(ngroups):
        if widths[g] > MAX_LANES or widths[g] < 1 or codes[g] > 8:
            raise ValueError("bad group width or pattern code")
    for i in prange(ngroups * oh, nogil=True, num_threads=nthreads, schedule="static"):
        g = i // oh
        oy = i % oh
        s0 = starts[g]
        gw = widths[g]
        mac_local = 0
        if codes[g] >= 0:
            loads += _dw_dispatch(codes[g], &x[s0 * hp * wp], wp, &taps[0, s0], cp, gw, &bias[s0],
                                  &out[s0 * oh * ow], ow, oy, stride, act, &mac_local)
        else:
            loads += _dw_row(&x[s0 * hp * wp], wp, &taps[0, s0], cp, gw, &bias[s0],
                             &out[s0 * oh * ow], ow, oy, stride, masks[g, 0], masks[g, 1],
                             masks[g, 2], act, &mac_local)
        macs += mac_local
    return macs, loads
