# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror ``privcxr._kernels_py`` exactly.

Accumulation orders are fixed so repeated calls are bit-stable; col2im and
the clipped-row sum accumulate in the same order as the numpy fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()

BACKEND = "cython"


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """(B, C, H, W) -> (B, Ho*Wo, C*kh*kw); column index is (c, i, j)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t K = C * kh * kw
    out_arr = np.zeros((B, Ho * Wo, K), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, ih, iw, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for c in range(C):
                        for i in range(kh):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(kw):
                                iw = ow * stride + j - pad
                                if iw < 0 or iw >= W:
                                    continue
                                col = (c * kh + i) * kw + j
                                out[b, oh * Wo + ow, col] = x[b, c, ih, iw]
    return out_arr


def col2im(const double[:, :, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    """Adjoint of im2col: scatter-add columns back onto a (B, C, H, W) grid."""
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Hp = H + 2 * pad, Wp = W + 2 * pad
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    padded_arr = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] padded = padded_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        col = (c * kh + i) * kw + j
                        for oh in range(Ho):
                            for ow in range(Wo):
                                padded[b, c, oh * stride + i, ow * stride + j] += cols[b, oh * Wo + ow, col]
    if pad == 0:
        return padded_arr
    return np.ascontiguousarray(padded_arr[:, :, pad:pad + H, pad:pad + W])


cdef inline void _mish_terms(double v, double* t, double* sig) noexcept nogil:
    # tanh(softplus(v)) = n(n+2) / (n(n+2) + 2) with n = e^v, evaluated via m = e^-|v|
    cdef double m = exp(-fabs(v))
    if v >= 0:
        t[0] = (1.0 + 2.0 * m) / (1.0 + 2.0 * m + 2.0 * m * m)
        sig[0] = 1.0 / (1.0 + m)
    else:
        t[0] = m * (m + 2.0) / (m * (m + 2.0) + 2.0)
        sig[0] = m / (1.0 + m)


def mish_forward(const double[::1] x):
    """Returns (mish(x), aux) where aux = (tanh(softplus(x)), sigmoid(x)) stacked."""
    cdef Py_ssize_t n = x.shape[0], k
    y_arr = np.empty(n, dtype=np.float64)
    aux_arr = np.empty((2, n), dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double[:, ::1] aux = aux_arr
    cdef double tv, sv
    with nogil:
        for k in range(n):
            _mish_terms(x[k], &tv, &sv)
            aux[0, k] = tv
            aux[1, k] = sv
            y[k] = x[k] * tv
    return y_arr, aux_arr


def mish_backward(const double[::1] x, const double[:, ::1] aux, const double[::1] grad):
    """d mish / dx = t + x * (1 - t^2) * sigmoid(x), times ``grad``."""
    cdef Py_ssize_t n = x.shape[0], k
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double tv
    with nogil:
        for k in range(n):
            tv = aux[0, k]
            out[k] = grad[k] * (tv + x[k] * (1.0 - tv * tv) * aux[1, k])
    return out_arr


def row_norms(const double[:, ::1] g):
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], b, p
    out_arr = np.empty(B, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double acc
    with nogil:
        for b in range(B):
            acc = 0.0
            for p in range(P):
                acc += g[b, p] * g[b, p]
            out[b] = sqrt(acc)
    return out_arr


def clip_rows(const double[:, ::1] g, double max_norm):
    """Scale each row by min(1, max_norm / ||row||). Returns (clipped, norms)."""
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], b, p
    norms = row_norms(g)
    cdef double[::1] nv = norms
    out_arr = np.empty((B, P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double f
    with nogil:
        for b in range(B):
            f = 1.0
            if nv[b] > max_norm:
                f = max_norm / nv[b]
            for p in range(P):
                out[b, p] = g[b, p] * f
    return out_arr, norms


def sum_rows(const double[:, ::1] g):
    """Row sum accumulated strictly in row order 0..B-1."""
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], b, p
    out_arr = np.zeros(P, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for b in range(B):
            for p in range(P):
                out[p] += g[b, p]
    return out_arr


def clip_sum(const double[:, ::1] g, double max_norm):
    """Sum of rows scaled by min(1, max_norm / ||row||), without materialising them.

    Returns (total, norms). Row order 0..B-1, product then add, as in the fallback.
    """
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], b, p
    norms = row_norms(g)
    cdef double[::1] nv = norms
    out_arr = np.zeros(P, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double f
    with nogil:
        for b in range(B):
            f = 1.0
            if nv[b] > max_norm:
                f = max_norm / nv[b]
            for p in range(P):
                out[p] += g[b, p] * f
    return out_arr, norms
