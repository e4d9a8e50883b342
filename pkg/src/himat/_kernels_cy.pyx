# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: periodic (a-trous) filtering and GLCM counting.

Mirrors `himat._kernels_np`; see there for the index conventions.
"""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused floating:
    float
    double


def filter_periodic_last(floating[:, ::1] x, double[::1] taps, int dilation, bint adjoint):
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef Py_ssize_t ntaps = taps.shape[0]
    cdef Py_ssize_t r, j, k, s
    cdef double t
    out_arr = np.zeros((rows, n), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef long sign = -1 if adjoint else 1
    for k in range(ntaps):
        t = taps[k]
        s = (sign * k * dilation) % n
        if s < 0:
            s += n
        if s == 0:
            for r in range(rows):
                for j in range(n):
                    out[r, j] += <floating> (t * x[r, j])
        else:
            for r in range(rows):
                for j in range(n - s):
                    out[r, j] += <floating> (t * x[r, j + s])
                for j in range(n - s, n):
                    out[r, j] += <floating> (t * x[r, j + s - n])
    return out_arr


def glcm_accumulate(int[:, ::1] q, int dy, int dx, int levels):
    cdef Py_ssize_t h = q.shape[0]
    cdef Py_ssize_t w = q.shape[1]
    cdef Py_ssize_t r0 = -dy if dy < 0 else 0
    cdef Py_ssize_t r1 = h - dy if dy > 0 else h
    cdef Py_ssize_t c0 = -dx if dx < 0 else 0
    cdef Py_ssize_t c1 = w - dx if dx > 0 else w
    cdef Py_ssize_t r, c
    counts_arr = np.zeros((levels, levels), dtype=np.int64)
    cdef long long[:, ::1] counts = counts_arr
    for r in range(r0, r1):
        for c in range(c0, c1):
            counts[q[r, c], q[r + dy, c + dx]] += 1
    return counts_arr
