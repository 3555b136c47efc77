# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the deconvolution kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef double _oi(double[::1] k) noexcept nogil:
    cdef Py_ssize_t n = k.shape[0], l
    cdef double peak = 0.0, acc = 0.0, a
    for l in range(n):
        a = fabs(k[l])
        if a > peak:
            peak = a
    if peak == 0.0:
        return 0.0
    for l in range(2, n):
        acc += fabs(k[l] - 2.0 * k[l - 1] + k[l - 2])
    return acc / (n * peak)


def oscillation_index_rows(k):
    cdef double[:, ::1] kv = np.ascontiguousarray(k, dtype=np.float64)
    cdef Py_ssize_t i, n = kv.shape[0]
    out = np.zeros(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _oi(kv[i])
    return out


def osvd_select(coef, basis, ranks, double oi_threshold):
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    basis = np.ascontiguousarray(basis, dtype=np.float64)
    cdef long long[::1] rk = np.ascontiguousarray(ranks, dtype=np.int64)
    cdef Py_ssize_t r0 = rk[0]
    # full-rank start through BLAS, as in the numpy backend
    k = np.ascontiguousarray(coef[:, :r0] @ basis[:, :r0].T)
    cdef double[:, ::1] c = coef
    # rows of bt are singular vectors, so the inner loop is unit-stride
    cdef double[:, ::1] bt = np.ascontiguousarray(basis.T)
    cdef Py_ssize_t n = c.shape[0], t_len = bt.shape[1], g_len = rk.shape[0]
    cdef Py_ssize_t v, g, i, j
    cdef double ci
    choice = np.full(n, g_len - 1, dtype=np.int64)
    converged = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] kv = k
    cdef long long[::1] ch = choice
    cdef unsigned char[::1] cv = converged
    with nogil:
        for v in range(n):
            for g in range(g_len):
                if g > 0:
                    for i in range(rk[g], rk[g - 1]):
                        ci = c[v, i]
                        if ci != 0.0:
                            for j in range(t_len):
                                kv[v, j] -= ci * bt[i, j]
                if _oi(kv[v]) <= oi_threshold:
                    ch[v] = g
                    cv[v] = 1
                    break
    return k, choice, converged.astype(bool)
