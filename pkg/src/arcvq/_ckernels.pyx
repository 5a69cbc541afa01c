# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, cos, sin, acos, M_PI

cnp.import_array()


def scatter_add_rows(const cnp.int64_t[:] index, src, Py_ssize_t n_rows):
    cdef double[:, :] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], d = s.shape[1], i, c, r
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, :] out = out_arr
    for i in range(n):
        r = index[i]
        for c in range(d):
            out[r, c] += s[i, c]
    return out_arr.astype(src.dtype, copy=False)


def topk_columns(cos_in, Py_ssize_t k):
    cdef double[:, :] cs = np.ascontiguousarray(cos_in, dtype=np.float64)
    cdef Py_ssize_t n = cs.shape[0], n_cols = cs.shape[1]
    cdef Py_ssize_t kk = k if k < n else n
    out_arr = np.empty((n_cols, kk), dtype=np.int64)
    cdef cnp.int64_t[:, :] out = out_arr
    cnt_arr = np.zeros(n_cols, dtype=np.int64)
    cdef cnp.int64_t[:] cnt = cnt_arr
    vals_arr = np.empty((n_cols, kk), dtype=np.float64)
    cdef double[:, :] vals = vals_arr
    cdef Py_ssize_t i, j, p, c
    cdef double v
    # row-major sweep, one small insertion buffer per column; strict '>'
    # keeps the earlier row ahead on ties
    for i in range(n):
        for j in range(n_cols):
            v = cs[i, j]
            c = cnt[j]
            if c == kk and not (v > vals[j, kk - 1]):
                continue
            p = c if c < kk else kk - 1
            while p > 0 and v > vals[j, p - 1]:
                vals[j, p] = vals[j, p - 1]
                out[j, p] = out[j, p - 1]
                p -= 1
            vals[j, p] = v
            out[j, p] = i
            if c < kk:
                cnt[j] = c + 1
    return out_arr


def arc_columns(cos_in, pos_in, double s, double m, double eps):
    cdef double[:, :] cs = np.ascontiguousarray(cos_in, dtype=np.float64)
    cdef cnp.int64_t[:, :] pos = np.ascontiguousarray(pos_in, dtype=np.int64)
    cdef Py_ssize_t n = cs.shape[0], n_cols = cs.shape[1], kk = pos.shape[1]
    cdef Py_ssize_t i, j, r
    cdef double lo = -1.0 + eps, hi = 1.0 - eps
    cdef double cos_m = cos(m), sin_m = sin(m)
    cdef double c, sn, b, gap, inv_k = 1.0 / n_cols
    cdef Py_ssize_t wraps = 0

    mark_arr = np.zeros((n, n_cols), dtype=np.uint8)
    cdef unsigned char[:, :] mark = mark_arr
    bp_arr = np.empty((n_cols, kk), dtype=np.float64)
    cdef double[:, :] bp = bp_arr
    dpos_arr = np.empty((n_cols, kk), dtype=np.float64)
    cdef double[:, :] dpos = dpos_arr
    mxn_arr = np.full(n_cols, -np.inf)
    cdef double[:] mxn = mxn_arr
    totn_arr = np.zeros(n_cols)
    cdef double[:] totn = totn_arr
    mxp_arr = np.full(n_cols, -np.inf)
    cdef double[:] mxp = mxp_arr
    lse_pos_arr = np.zeros(n_cols)
    cdef double[:] lse_pos = lse_pos_arr
    lse_all_arr = np.zeros(n_cols)
    cdef double[:] lse_all = lse_all_arr
    scale_arr = np.zeros(n_cols)
    cdef double[:] scale = scale_arr
    loss_arr = np.empty(n_cols)
    cdef double[:] loss = loss_arr
    dcos_arr = np.zeros((n, n_cols), dtype=np.float64)
    cdef double[:, :] dcos = dcos_arr

    for j in range(n_cols):
        for r in range(kk):
            i = pos[j, r]
            mark[i, j] = 1
            c = cs[i, j]
            if c < lo:
                c = lo
            elif c > hi:
                c = hi
            sn = sqrt(1.0 - c * c)
            b = s * (c * cos_m - sn * sin_m)
            bp[j, r] = b
            dpos[j, r] = s * (cos_m + sin_m * c / sn) if (cs[i, j] > lo and cs[i, j] < hi) else 0.0
            if acos(c) + m > M_PI:
                wraps += 1
            if b > mxp[j]:
                mxp[j] = b

    with nogil:
        # negatives: running max, then shifted sum
        for i in range(n):
            for j in range(n_cols):
                if mark[i, j]:
                    continue
                c = cs[i, j]
                if c < lo:
                    c = lo
                elif c > hi:
                    c = hi
                if s * c > mxn[j]:
                    mxn[j] = s * c
        for i in range(n):
            for j in range(n_cols):
                if mark[i, j]:
                    continue
                c = cs[i, j]
                if c < lo:
                    c = lo
                elif c > hi:
                    c = hi
                b = exp(s * c - mxn[j])
                totn[j] += b
                dcos[i, j] = b
        # per column: -log(P / (P + N)) = softplus(lse_neg - lse_pos)
        for j in range(n_cols):
            b = 0.0
            for r in range(kk):
                b += exp(bp[j, r] - mxp[j])
            lse_pos[j] = mxp[j] + log(b)
            if totn[j] > 0.0:
                gap = mxn[j] + log(totn[j]) - lse_pos[j]
                if gap > 0.0:
                    loss[j] = gap + log1p(exp(-gap))
                else:
                    loss[j] = log1p(exp(gap))
                scale[j] = exp(mxn[j] - lse_pos[j] - loss[j]) * s * inv_k
            else:
                loss[j] = 0.0
            lse_all[j] = lse_pos[j] + loss[j]
        for i in range(n):
            for j in range(n_cols):
                if mark[i, j]:
                    continue
                c = cs[i, j]
                if c > lo and c < hi:
                    dcos[i, j] = dcos[i, j] * scale[j]
                else:
                    dcos[i, j] = 0.0
        for j in range(n_cols):
            for r in range(kk):
                i = pos[j, r]
                dcos[i, j] = (exp(bp[j, r] - lse_all[j]) - exp(bp[j, r] - lse_pos[j])) * dpos[j, r] * inv_k
    return loss_arr, dcos_arr, wraps
