# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops with the same signatures as _kernels_py.

stencil_apply and noise_apply add terms in the same order as the numpy
versions; dirichlet_sum sums each step sequentially where numpy sums pairwise.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow

cnp.import_array()

BACKEND = "cython"


def stencil_apply(const double[::1] Y, const long long[:, ::1] src,
                  const double[:, ::1] w, const double[::1] diag, out=None):
    cdef Py_ssize_t m = src.shape[0], n = src.shape[1], s, k
    cdef long long j
    cdef double acc
    if out is None:
        out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for k in range(n):
            acc = diag[k] * Y[k]
            for s in range(m):
                j = src[s, k]
                if j >= 0:
                    acc = acc + w[s, k] * Y[j]
            res[k] = acc
    return out


def dirichlet_sum(const double[::1] Y, const long long[:, ::1] dst,
                  const double[:, ::1] w, double p):
    cdef Py_ssize_t m = dst.shape[0], n = dst.shape[1], s, k
    cdef long long j
    cdef double total = 0.0, part, a, b, term
    cdef bint square = p == 2.0
    cdef double[::1] Yp = np.empty(n, dtype=np.float64)
    with nogil:
        if not square:
            for k in range(n):
                Yp[k] = pow(Y[k], p - 1.0)
        for s in range(m):
            part = 0.0
            for k in range(n):
                if w[s, k] == 0.0:
                    continue
                a = Y[k]
                j = dst[s, k]
                b = Y[j] if j >= 0 else 0.0
                if square:
                    term = (b - a) * (b - a)
                else:
                    term = ((Yp[j] if j >= 0 else 0.0) - Yp[k]) * (b - a)
                part = part + w[s, k] * term
            total = total + part
    return total


def noise_apply(const double complex[:, ::1] full, const long long[:, ::1] src,
                const double complex[:, ::1] coef, const double complex[:, ::1] dW,
                out=None):
    cdef Py_ssize_t P = full.shape[0], c = src.shape[0], r = src.shape[1]
    cdef Py_ssize_t p, ch, j
    cdef double complex acc
    if out is None:
        out = np.empty((P, r), dtype=np.complex128)
    cdef double complex[:, ::1] res = out
    with nogil:
        for p in range(P):
            for j in range(r):
                acc = 0.0
                for ch in range(c):
                    acc = acc + (coef[ch, j] * full[p, src[ch, j]]) * dW[p, ch]
                res[p, j] = acc
    return out
