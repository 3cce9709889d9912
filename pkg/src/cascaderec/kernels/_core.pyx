# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: nearest-centroid scans and gated attention.

Same contracts as kernels.fallback; see there for semantics.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef fused floating:
    float
    double


def nearest_centroid(object x_in, object c_in, int chunk=0):
    # chunk accepted for API parity with the fallback; scan is row-wise anyway
    cdef double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(c_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], d = x.shape[1]
    if c.shape[1] != d:
        raise ValueError("dimension mismatch between points and centroids")
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, t
    cdef double best, acc, diff
    cdef cnp.int64_t best_j
    for i in range(n):
        best = -1.0
        best_j = 0
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - c[j, t]
                acc += diff * diff
            if best < 0.0 or acc < best:
                best = acc
                best_j = j
        idx[i] = best_j
        dist[i] = best
    return idx_arr, dist_arr


def gated_attention(object q_in, object k_in, object v_in, object first_valid_in,
                    double inv_scale):
    q_arr = np.ascontiguousarray(q_in)
    dt = np.float32 if q_arr.dtype == np.float32 else np.float64
    return _gated_attention_impl(
        np.ascontiguousarray(q_arr, dtype=dt),
        np.ascontiguousarray(k_in, dtype=dt),
        np.ascontiguousarray(v_in, dtype=dt),
        np.ascontiguousarray(first_valid_in, dtype=np.int64), inv_scale, dt)


def _gated_attention_impl(floating[:, :, :, ::1] q, floating[:, :, :, ::1] k,
                          floating[:, :, :, ::1] v, cnp.int64_t[::1] first_valid,
                          double inv_scale, object dtype):
    cdef Py_ssize_t nb = q.shape[0], nh = q.shape[1], nl = q.shape[2], nd = q.shape[3]
    s_arr = np.zeros((nb, nh, nl, nl), dtype=dtype)
    o_arr = np.zeros((nb, nh, nl, nd), dtype=dtype)
    cdef floating[:, :, :, ::1] s = s_arr
    cdef floating[:, :, :, ::1] o = o_arr
    cdef Py_ssize_t b, h, t, cs, d
    cdef cnp.int64_t fv
    cdef double acc, a
    for b in range(nb):
        fv = first_valid[b]
        if fv >= nl:
            continue
        for h in range(nh):
            for t in range(fv, nl):
                for cs in range(fv, t + 1):
                    acc = 0.0
                    for d in range(nd):
                        acc += <double> q[b, h, t, d] * <double> k[b, h, cs, d]
                    s[b, h, t, cs] = <floating> acc
                    a = acc / (1.0 + exp(-acc)) * inv_scale
                    for d in range(nd):
                        o[b, h, t, d] += <floating> (a * <double> v[b, h, cs, d])
    return s_arr, o_arr


def gated_attention_backward(object do_in, object s_in, object q_in, object k_in,
                             object v_in, object first_valid_in, double inv_scale):
    do_arr = np.ascontiguousarray(do_in)
    dt = np.float32 if do_arr.dtype == np.float32 else np.float64
    return _gated_attention_bwd_impl(
        np.ascontiguousarray(do_arr, dtype=dt),
        np.ascontiguousarray(s_in, dtype=dt),
        np.ascontiguousarray(q_in, dtype=dt),
        np.ascontiguousarray(k_in, dtype=dt),
        np.ascontiguousarray(v_in, dtype=dt),
        np.ascontiguousarray(first_valid_in, dtype=np.int64), inv_scale, dt)


def _gated_attention_bwd_impl(floating[:, :, :, ::1] do, floating[:, :, :, ::1] s,
                              floating[:, :, :, ::1] q, floating[:, :, :, ::1] k,
                              floating[:, :, :, ::1] v, cnp.int64_t[::1] first_valid,
                              double inv_scale, object dtype):
    cdef Py_ssize_t nb = q.shape[0], nh = q.shape[1], nl = q.shape[2], nd = q.shape[3]
    dq_arr = np.zeros((nb, nh, nl, nd), dtype=dtype)
    dk_arr = np.zeros((nb, nh, nl, nd), dtype=dtype)
    dv_arr = np.zeros((nb, nh, nl, nd), dtype=dtype)
    cdef floating[:, :, :, ::1] dq = dq_arr
    cdef floating[:, :, :, ::1] dk = dk_arr
    cdef floating[:, :, :, ::1] dv = dv_arr
    cdef Py_ssize_t b, h, t, cs, d
    cdef cnp.int64_t fv
    cdef double sv, sig, a, da, ds
    for b in range(nb):
        fv = first_valid[b]
        if fv >= nl:
            continue
        for h in range(nh):
            for t in range(fv, nl):
                for cs in range(fv, t + 1):
                    sv = <double> s[b, h, t, cs]
                    sig = 1.0 / (1.0 + exp(-sv))
                    a = sv * sig * inv_scale
                    da = 0.0
                    for d in range(nd):
                        da += <double> do[b, h, t, d] * <double> v[b, h, cs, d]
                        dv[b, h, cs, d] += <floating> (a * <double> do[b, h, t, d])
                    ds = da * sig * (1.0 + sv * (1.0 - sig)) * inv_scale
                    for d in range(nd):
                        dq[b, h, t, d] += <floating> (ds * <double> k[b, h, cs, d])
                        dk[b, h, cs, d] += <floating> (ds * <double> q[b, h, t, d])
    return dq_arr, dk_arr, dv_arr
