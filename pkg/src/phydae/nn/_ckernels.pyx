# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    cdef Py_ssize_t b, y, x, i, j, ch, row, col
    out_arr = np.empty((n * ho * wo, kh * kw * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        row = 0
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[row, col] = xp[b, y * stride + i, x * stride + j, ch]
                                col = col + 1
                    row = row + 1
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t b, y, x, i, j, ch, base
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    # (i, j) outermost: per-pixel accumulation order matches the numpy path
    with nogil:
        for i in range(kh):
            for j in range(kw):
                base = (i * kw + j) * c
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += \
                                    cols[(b * ho + y) * wo + x, base + ch]
    return out_arr


def dw_forward(const double[:, :, :, ::1] xp, const double[:, :, ::1] w,
               Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], kh = w.shape[0], kw = w.shape[1], c = w.shape[2]
    cdef Py_ssize_t b, y, x, i, j, ch
    cdef double acc
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        acc = 0.0
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + xp[b, y * stride + i, x * stride + j, ch] * w[i, j, ch]
                        out[b, y, x, ch] = acc
    return out_arr


def dw_backward_input(const double[:, :, :, ::1] g, const double[:, :, ::1] w,
                      Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t stride):
    cdef Py_ssize_t n = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], c = w.shape[2]
    cdef Py_ssize_t b, y, x, i, j, ch
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += g[b, y, x, ch] * w[i, j, ch]
    return out_arr


def dw_backward_weight(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] g,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = g.shape[0], ho = g.shape[1], wo = g.shape[2], c = g.shape[3]
    cdef Py_ssize_t b, y, x, i, j, ch
    out_arr = np.zeros((kh, kw, c), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                out[i, j, ch] += xp[b, y * stride + i, x * stride + j, ch] * g[b, y, x, ch]
    return out_arr
