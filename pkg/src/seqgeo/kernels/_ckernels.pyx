# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the numeric kernels.

Hand-written C loops beat the numpy backend on the tiny matrices this
package lives on (a handful of rows/columns), where per-call dispatch
overhead dominates. Semantics mirror _pykernels exactly; see
kernels/__init__.py for the shared contract.
"""

from libc.math cimport exp, log1p, sqrt, fabs

import numpy as np

BACKEND_NAME = "cython"

ctypedef fused real:
    float
    double


cdef inline object _empty(Py_ssize_t rows, Py_ssize_t cols, bint single):
    return np.empty((rows, cols), dtype=np.float32 if single else np.float64)


def matmul(real[:, ::1] a, real[:, ::1] b, bint ta=False, bint tb=False):
    cdef Py_ssize_t m = a.shape[1] if ta else a.shape[0]
    cdef Py_ssize_t k = a.shape[0] if ta else a.shape[1]
    cdef Py_ssize_t n = b.shape[0] if tb else b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef real acc
    if (b.shape[1] if tb else b.shape[0]) != k:
        raise ValueError("matmul: inner dimensions differ")
    cdef real aip
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    if not ta and not tb:
        # j-inner form vectorizes over b's contiguous rows; per-entry
        # accumulation order (ascending p) matches the naive triple loop
        for i in range(m):
            for j in range(n):
                out[i, j] = 0
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
    elif not ta and tb:
        for i in range(m):
            for j in range(n):
                acc = 0
                for p in range(k):
                    acc += a[i, p] * b[j, p]
                out[i, j] = acc
    elif ta and not tb:
        for i in range(m):
            for j in range(n):
                acc = 0
                for p in range(k):
                    acc += a[p, i] * b[p, j]
                out[i, j] = acc
    else:
        for i in range(m):
            for j in range(n):
                acc = 0
                for p in range(k):
                    acc += a[p, i] * b[j, p]
                out[i, j] = acc
    return out_np


def add(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] + b[i, j]
    return out_np


def sub(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] - b[i, j]
    return out_np


def mul(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] * b[i, j]
    return out_np


def scale(real[:, ::1] a, double c):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef real cc = <real> c
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] * cc
    return out_np


def add_scalar(real[:, ::1] a, double c):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef real cc = <real> c
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] + cc
    return out_np


def scale_rows(real[:, ::1] a, real[::1] v):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] * v[i]
    return out_np


def softmax_rows(real[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef real mx, s
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        mx = a[i, 0]
        for j in range(1, n):
            if a[i, j] > mx:
                mx = a[i, j]
        s = 0
        for j in range(n):
            out[i, j] = <real> exp(a[i, j] - mx)
            s += out[i, j]
        for j in range(n):
            out[i, j] /= s
    return out_np


def softmax_rows_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    cdef real dot
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        dot = 0
        for j in range(n):
            dot += y[i, j] * gy[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_np


def sqrt_nonneg(real[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = <real> sqrt(a[i, j]) if a[i, j] > 0 else 0
    return out_np


def sqrt_nonneg_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            out[i, j] = gy[i, j] / (2 * y[i, j]) if y[i, j] > 0 else 0
    return out_np


def softplus(real[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef double x
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            x = a[i, j]
            # log(1+e^x) = max(x,0) + log1p(e^{-|x|})
            out[i, j] = <real> ((x if x > 0 else 0) + log1p(exp(-fabs(x))))
    return out_np


def softplus_bwd(real[:, ::1] x, real[:, ::1] gy):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double e
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        for j in range(n):
            e = exp(-fabs(x[i, j]))
            out[i, j] = <real> (gy[i, j] * (1.0 / (1.0 + e) if x[i, j] >= 0 else e / (1.0 + e)))
    return out_np


def normalize_rows(real[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef real s
    out_np = _empty(m, n, real is float)
    norms_np = np.empty(m, dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    cdef real[::1] norms = norms_np
    for i in range(m):
        s = 0
        for j in range(n):
            s += a[i, j] * a[i, j]
        s = <real> sqrt(s)
        if s == 0:
            raise ValueError("degenerate feature: zero-norm row cannot be normalized")
        norms[i] = s
        for j in range(n):
            out[i, j] = a[i, j] / s
    return out_np, norms_np


def normalize_rows_bwd(real[:, ::1] y, real[::1] norms, real[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    cdef real dot
    out_np = _empty(m, n, real is float)
    cdef real[:, ::1] out = out_np
    for i in range(m):
        dot = 0
        for j in range(n):
            dot += y[i, j] * gy[i, j]
        for j in range(n):
            out[i, j] = (gy[i, j] - y[i, j] * dot) / norms[i]
    return out_np


def sum_all(real[:, ::1] a):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    cdef double s = 0
    for i in range(m):
        for j in range(n):
            s += a[i, j]
    return s
