# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-node kernels. Same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


def pairwise_sum(double[::1] a):
    """Level-wise pairwise sum; bit-identical to the pure-Python fallback."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, m
    if n == 0:
        return 0.0
    cdef double[::1] buf = np.array(a, dtype=np.float64, copy=True)
    while n > 1:
        m = n // 2
        for i in range(m):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if n % 2:
            buf[m] = buf[n - 1]
            n = m + 1
        else:
            n = m
    return buf[0]


def sym2_inverse(double[::1] a11, double[::1] a12, double[::1] a22, double[::1] given=None):
    """det, log det and inverse entries of per-node symmetric 2x2 matrices.

    ``given`` supplies determinants computed more accurately elsewhere.
    Returns (det, logdet, i11, i12, i22, bad) where bad is the first node
    that is not positive definite, or -1.
    """
    cdef Py_ssize_t n = a11.shape[0], k
    cdef Py_ssize_t bad = -1
    cdef bint have = given is not None
    det = np.empty(n)
    logdet = np.empty(n)
    i11 = np.empty(n)
    i12 = np.empty(n)
    i22 = np.empty(n)
    cdef double[::1] d = det, ld = logdet, b11 = i11, b12 = i12, b22 = i22
    cdef double dd
    for k in range(n):
        dd = given[k] if have else a11[k] * a22[k] - a12[k] * a12[k]
        d[k] = dd
        if dd > 0.0 and a11[k] > 0.0:
            ld[k] = log(dd)
            b11[k] = a22[k] / dd
            b12[k] = -a12[k] / dd
            b22[k] = a11[k] / dd
        else:
            if bad < 0:
                bad = k
            ld[k] = float("nan")
            b11[k] = float("nan")
            b12[k] = float("nan")
            b22[k] = float("nan")
    return det, logdet, i11, i12, i22, bad


def row_scaled_sum(double[:, ::1] coefs, double[:, ::1] data, long long[::1] indptr):
    """sum_k coefs[k, row] * data[k] over the entries of a shared CSR pattern."""
    cdef Py_ssize_t K = data.shape[0], nnz = data.shape[1]
    cdef Py_ssize_t nrow = indptr.shape[0] - 1, r, e, k
    out = np.zeros(nnz)
    cdef double[::1] o = out
    cdef double acc
    for r in range(nrow):
        for e in range(indptr[r], indptr[r + 1]):
            acc = 0.0
            for k in range(K):
                acc += coefs[k, r] * data[k, e]
            o[e] = acc
    return out


def centred_matvec(double[::1] data, int[::1] indices, int[::1] indptr, double[::1] f):
    """sum_j A_ij (f_j - f_i) per row of a CSR matrix."""
    cdef Py_ssize_t nrow = indptr.shape[0] - 1, r, e
    out = np.empty(nrow)
    cdef double[::1] o = out
    cdef double acc, fr
    for r in range(nrow):
        acc = 0.0
        fr = f[r]
        for e in range(indptr[r], indptr[r + 1]):
            acc += data[e] * (f[indices[e]] - fr)
        o[r] = acc
    return out
