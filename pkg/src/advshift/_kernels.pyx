# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NHWC float64 tensors.

Loop order in ``col2im`` matches the numpy fallback exactly (kernel offsets
outermost) so both backends accumulate in the same order and agree bitwise.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[3]
    out_arr = np.empty((n * ho * wo, k * k * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch, row, col
    with nogil:
        row = 0
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    col = 0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                out[row, col] = xp[b, y * stride + i, x * stride + j, ch]
                                col += 1
                    row += 1
    return out_arr


def col2im(const double[:, :, :, :, :, ::1] dcols, Py_ssize_t stride,
           Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t n = dcols.shape[0]
    cdef Py_ssize_t ho = dcols.shape[1]
    cdef Py_ssize_t wo = dcols.shape[2]
    cdef Py_ssize_t k = dcols.shape[3]
    cdef Py_ssize_t c = dcols.shape[5]
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, ch
    with nogil:
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += dcols[b, y, x, i, j, ch]
    return out_arr
