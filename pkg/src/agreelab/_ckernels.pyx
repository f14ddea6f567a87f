# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, sqrt, INFINITY

cnp.import_array()


def elman_scan(const double[:, ::1] xw, const double[:, ::1] wh):
    cdef Py_ssize_t T = xw.shape[0], d = xw.shape[1], t, i, j
    H_arr = np.empty((T, d))
    Z_arr = np.empty((T, d))
    cdef double[:, ::1] H = H_arr
    cdef double[:, ::1] Z = Z_arr
    cdef double acc
    for t in range(T):
        for j in range(d):
            acc = xw[t, j]
            if t > 0:
                for i in range(d):
                    acc += H[t - 1, i] * wh[i, j]
            Z[t, j] = acc
        for j in range(d):
            H[t, j] = tanh(Z[t, j])
    return H_arr, Z_arr


def elman_scan_backward(const double[:, ::1] dH, const double[:, ::1] slope,
                        const double[:, ::1] wh):
    cdef Py_ssize_t T = dH.shape[0], d = dH.shape[1], t, i, j
    dZ_arr = np.empty((T, d))
    cdef double[:, ::1] dZ = dZ_arr
    cdef double[::1] carry = np.zeros(d)
    cdef double acc
    for t in range(T - 1, -1, -1):
        for j in range(d):
            dZ[t, j] = (dH[t, j] + carry[j]) * slope[t, j]
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += wh[i, j] * dZ[t, j]
            carry[i] = acc
    return dZ_arr


def kendall_counts(const double[::1] a, const double[::1] b):
    cdef Py_ssize_t n = a.shape[0], i, j
    cdef long s = 0, ta = 0, tb = 0
    cdef int sa, sb
    cdef double da, db
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            db = b[i] - b[j]
            sa = (da > 0) - (da < 0)
            sb = (db > 0) - (db < 0)
            s += sa * sb
            if sa == 0:
                ta += 1
            if sb == 0:
                tb += 1
    return float(s), int(ta), int(tb), int(n * (n - 1) // 2)


def nearest_distances(const double[:, ::1] X, int block=256):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j, k
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double best, acc, diff
    for i in range(n):
        best = INFINITY
        for j in range(n):
            if j == i:
                continue
            acc = 0.0
            for k in range(d):
                diff = X[i, k] - X[j, k]
                acc += diff * diff
            if acc < best:
                best = acc
        out[i] = sqrt(best)
    return out_arr
