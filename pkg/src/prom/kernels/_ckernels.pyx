# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integer kernels.

Same contracts as ``_pykernels``: int8 operands in, exact int32 accumulators
out. The ternary kernel only adds and subtracts input rows.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, int32_t
from libc.math cimport fabs

cnp.import_array()


def pw_ternary(const int8_t[:, :, ::1] x, const int8_t[:, ::1] trits):
    """x: B x C x P, trits: O x C -> int32 B x O x P."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], P = x.shape[2]
    cdef Py_ssize_t O = trits.shape[0]
    cdef Py_ssize_t b, o, i, p, k, npos, nneg
    out = np.zeros((B, O, P), dtype=np.int32)
    cdef int32_t[:, :, ::1] acc = out
    cdef Py_ssize_t[::1] pos = np.empty(C, dtype=np.intp)
    cdef Py_ssize_t[::1] neg = np.empty(C, dtype=np.intp)
    cdef int32_t* row
    cdef const int8_t* src
    with nogil:
        for o in range(O):
            npos = 0
            nneg = 0
            for i in range(C):
                if trits[o, i] == 1:
                    pos[npos] = i
                    npos += 1
                elif trits[o, i] == -1:
                    neg[nneg] = i
                    nneg += 1
            for b in range(B):
                row = &acc[b, o, 0]
                for k in range(npos):
                    src = &x[b, pos[k], 0]
                    for p in range(P):
                        row[p] += src[p]
                for k in range(nneg):
                    src = &x[b, neg[k], 0]
                    for p in range(P):
                        row[p] -= src[p]
    return out


def conv_int8(const int8_t[:, :, :, ::1] x, const int8_t[:, :, :, ::1] w,
              Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t groups):
    """Direct grouped cross-correlation with zero padding."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], CG = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t KW = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - K) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - KW) // stride + 1
    cdef Py_ssize_t OG = O // groups
    cdef Py_ssize_t b, o, c, ci, kh, kw, oh, ow, ih, off, lo, hi
    cdef int32_t wv
    cdef int32_t* row
    cdef const int8_t* src
    out = np.zeros((B, O, Ho, Wo), dtype=np.int32)
    cdef int32_t[:, :, :, ::1] acc = out
    with nogil:
        for b in range(B):
            for o in range(O):
                for ci in range(CG):
                    c = (o // OG) * CG + ci
                    for kh in range(K):
                        for kw in range(KW):
                            wv = w[o, ci, kh, kw]
                            if wv == 0:
                                continue
                            off = kw - pad
                            lo = 0
                            while lo < Wo and lo * stride + off < 0:
                                lo += 1
                            hi = Wo
                            while hi > lo and (hi - 1) * stride + off >= W:
                                hi -= 1
                            for oh in range(Ho):
                                ih = oh * stride + kh - pad
                                if ih < 0 or ih >= H:
                                    continue
                                row = &acc[b, o, oh, 0]
                                src = &x[b, c, ih, 0]
                                for ow in range(lo, hi):
                                    row[ow] += wv * src[ow * stride + off]
    return out


def linear_int8(const int8_t[:, ::1] x, const int8_t[:, ::1] w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], O = w.shape[0]
    cdef Py_ssize_t b, o, c
    cdef int32_t s
    out = np.zeros((B, O), dtype=np.int32)
    cdef int32_t[:, ::1] acc = out
    with nogil:
        for b in range(B):
            for o in range(O):
                s = 0
                for c in range(C):
                    s += <int32_t>x[b, c] * <int32_t>w[o, c]
                acc[b, o] = s
    return out


ctypedef fused real:
    float
    double


def dw_float(real[:, :, :, ::1] x, real[:, ::1] w, Py_ssize_t K, Py_ssize_t stride, Py_ssize_t pad):
    """Float depthwise forward. w: C x (K*K)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - K) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - K) // stride + 1
    cdef Py_ssize_t b, c, kh, kw, oh, ow, ih, iw, lo, hi
    cdef real wv
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for kh in range(K):
                    for kw in range(K):
                        wv = w[c, kh * K + kw]
                        # output columns whose input column stays in bounds
                        lo = 0
                        while lo < Wo and lo * stride + kw - pad < 0:
                            lo += 1
                        hi = Wo
                        while hi > lo and (hi - 1) * stride + kw - pad >= W:
                            hi -= 1
                        for oh in range(Ho):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(lo, hi):
                                y[b, c, oh, ow] += wv * x[b, c, ih, ow * stride + kw - pad]
    return out


def dw_float_backward(real[:, :, :, ::1] x, real[:, ::1] w, real[:, :, :, ::1] dy,
                      Py_ssize_t K, Py_ssize_t stride, Py_ssize_t pad, bint need_dx):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = dy.shape[2], Wo = dy.shape[3]
    cdef Py_ssize_t b, c, kh, kw, oh, ow, ih, lo, hi, off
    cdef real wv
    cdef double s
    cdef real* xr
    cdef real* gr
    cdef real* dr
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((B, C, H, W), dtype=dtype)
    dw_arr = np.zeros((C, K * K), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef real[:, ::1] dw = dw_arr
    with nogil:
        for c in range(C):
            for kh in range(K):
                for kw in range(K):
                    wv = w[c, kh * K + kw]
                    off = kw - pad
                    lo = 0
                    while lo < Wo and lo * stride + off < 0:
                        lo += 1
                    hi = Wo
                    while hi > lo and (hi - 1) * stride + off >= W:
                        hi -= 1
                    s = 0
                    for b in range(B):
                        for oh in range(Ho):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= H:
                                continue
                            xr = &x[b, c, ih, 0]
                            gr = &dy[b, c, oh, 0]
                            for ow in range(lo, hi):
                                s += gr[ow] * xr[ow * stride + off]
                            if need_dx:
                                dr = &dx[b, c, ih, 0]
                                for ow in range(lo, hi):
                                    dr[ow * stride + off] += gr[ow] * wv
                    dw[c, kh * K + kw] = <real>s
    return dx_arr, dw_arr


def prelu_float(real[:, :, :, ::1] x, real[::1] slope):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], P = x.shape[2] * x.shape[3]
    cdef Py_ssize_t b, c, i
    cdef real a, v, g
    cdef real* src
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, x.shape[2], x.shape[3]), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    with nogil:
        for b in range(B):
            for c in range(C):
                a = slope[c]
                src = &x[b, c, 0, 0]
                dst = &y[b, c, 0, 0]
                for i in range(P):
                    v = src[i]
                    # branchless: random signs defeat the predictor
                    g = (v + fabs(v)) * <real>0.5
                    dst[i] = g + a * (v - g)
    return out


def prelu_float_backward(real[:, :, :, ::1] x, real[::1] slope, real[:, :, :, ::1] dy):
    """Returns (dx, dslope); the positive branch is taken at zero."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], P = x.shape[2] * x.shape[3]
    cdef Py_ssize_t b, c, i
    cdef real a, v, g, n, k, acc
    cdef real* src
    cdef real* gy
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((B, C, x.shape[2], x.shape[3]), dtype=dtype)
    ds_arr = np.zeros(C, dtype=np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef double[::1] ds = ds_arr
    with nogil:
        for b in range(B):
            for c in range(C):
                a = slope[c]
                src = &x[b, c, 0, 0]
                gy = &dy[b, c, 0, 0]
                dst = &dx[b, c, 0, 0]
                acc = 0
                for i in range(P):
                    v = src[i]
                    g = gy[i]
                    n = (v - fabs(v)) * <real>0.5
                    k = <real>(v < 0)
                    dst[i] = g * (1 - k) + a * g * k
                    acc += n * g
                ds[c] += acc
    return dx_arr, ds_arr.astype(dtype)


def bn_float_backward(real[:, :, :, ::1] xhat, real[:, :, :, ::1] dy, real[::1] scale, bint batch_stats):
    """Returns (dx, dgamma, dbeta) for y = gamma * xhat + beta.

    ``scale`` is gamma / sqrt(var + eps). With batch statistics the mean and
    variance gradients are folded in.
    """
    cdef Py_ssize_t B = xhat.shape[0], C = xhat.shape[1], P = xhat.shape[2] * xhat.shape[3]
    cdef Py_ssize_t b, c, i
    cdef double sg, sb, m = B * P
    cdef real kg, kb, k
    cdef real* xh
    cdef real* gy
    cdef real* dst
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((B, C, xhat.shape[2], xhat.shape[3]), dtype=dtype)
    dg_arr = np.zeros(C, dtype=np.float64)
    db_arr = np.zeros(C, dtype=np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    with nogil:
        for c in range(C):
            sg = 0
            sb = 0
            for b in range(B):
                xh = &xhat[b, c, 0, 0]
                gy = &dy[b, c, 0, 0]
                for i in range(P):
                    sg += xh[i] * gy[i]
                    sb += gy[i]
            dg[c] = sg
            db[c] = sb
            k = scale[c]
            if batch_stats:
                kg = <real>(sg / m)
                kb = <real>(sb / m)
            else:
                kg = 0
                kb = 0
            for b in range(B):
                xh = &xhat[b, c, 0, 0]
                gy = &dy[b, c, 0, 0]
                dst = &dx[b, c, 0, 0]
                for i in range(P):
                    dst[i] = (gy[i] - xh[i] * kg - kb) * k
    return dx_arr, dg_arr.astype(dtype), db_arr.astype(dtype)
