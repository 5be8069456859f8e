# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython conv-lowering kernels (im2col / col2im).

Same contracts as fedrecon.kernels.fallback; col2im accumulates kernel
offsets in (ki, kj) order so results match the fallback bit-for-bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.ndarray x_arr, int kh, int kw, int stride):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_arr, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out_arr = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            for j in range(wo):
                                out[b, row, i * wo + j] = x[b, ch, i * stride + ki, j * stride + kj]
    return out_arr


def col2im(cnp.ndarray cols_arr, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp,
           Py_ssize_t wp, int kh, int kw, int stride):
    cdef double[:, :, ::1] cols = np.ascontiguousarray(cols_arr, dtype=np.float64)
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            for j in range(wo):
                                out[b, ch, i * stride + ki, j * stride + kj] += cols[b, row, i * wo + j]
    return out_arr
