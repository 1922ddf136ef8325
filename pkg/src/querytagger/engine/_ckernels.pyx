# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] = y[i, j] / s
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            gx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def log_softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s, lse
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            s += exp(x[i, j] - mx)
        lse = log(s)
        for j in range(m):
            y[i, j] = (x[i, j] - mx) - lse
    return out


def log_softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j]
        for j in range(m):
            gx[i, j] = g[i, j] - exp(y[i, j]) * s
    return out


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    xh = np.empty((n, m))
    rs = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xh
    cdef double[::1] rstd = rs
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu = mu / m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var = var / m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            xhat[i, j] = (x[i, j] - mu) * r
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return out, xh, rs


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    gx_arr = np.empty((n, m))
    gg_arr = np.zeros(m)
    gb_arr = np.zeros(m)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double s1, s2, gh
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            gh = g[i, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            gg[j] += g[i, j] * xhat[i, j]
            gb[j] += g[i, j]
        s1 = s1 / m
        s2 = s2 / m
        for j in range(m):
            gx[i, j] = (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def gelu_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return out


def gelu_bwd(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    cdef double v, t
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            t = tanh(GELU_C * (v + 0.044715 * v * v * v))
            gx[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t)
                                  * GELU_C * (1.0 + 3 * 0.044715 * v * v))
    return out
