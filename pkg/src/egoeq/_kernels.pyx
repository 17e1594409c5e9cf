# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (NCHW, float64).

Mirrors ``_kernels_py`` function for function.
"""

import numpy as np

BACKEND = "cython"


cdef _im2col(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    # rows ordered (n, oh, ow), columns (c, i, j) to match w.reshape(F, -1)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cols_arr = np.empty((n * ho * wo, c * k * k))
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t in_, oh, ow, ci, i, j, row, col
    for in_ in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (in_ * ho + oh) * wo + ow
                col = 0
                for ci in range(c):
                    for i in range(k):
                        for j in range(k):
                            cols[row, col] = x[in_, ci, oh * stride + i, ow * stride + j]
                            col += 1
    return cols_arr


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (h - k) // stride + 1, wo = (wd - k) // stride + 1
    cols = _im2col(x, k, stride, ho, wo)
    y = cols @ np.asarray(w).reshape(f, -1).T  # GEMM goes to BLAS
    y += np.asarray(b)
    return np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gy, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    g_mat = np.ascontiguousarray(np.asarray(gy).transpose(0, 2, 3, 1).reshape(-1, f))
    cols = _im2col(x, k, stride, ho, wo)
    gw_arr = (g_mat.T @ cols).reshape(f, c, k, k)
    gb_arr = g_mat.sum(axis=0)
    gcols_arr = g_mat @ np.asarray(w).reshape(f, -1)
    cdef double[:, ::1] gcols = gcols_arr
    gx_arr = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t in_, oh, ow, ci, i, j, row, col
    for in_ in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (in_ * ho + oh) * wo + ow
                col = 0
                for ci in range(c):
                    for i in range(k):
                        for j in range(k):
                            gx[in_, ci, oh * stride + i, ow * stride + j] += gcols[row, col]
                            col += 1
    return gx_arr, gw_arr, gb_arr


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = (h - window) // stride + 1, wo = (wd - window) // stride + 1
    out = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] y = out
    cdef long long[:, :, :, ::1] am = idx
    cdef Py_ssize_t in_, ci, oh, ow, i, j, r, cc, best_i
    cdef double best, v
    for in_ in range(n):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    r = oh * stride
                    cc = ow * stride
                    best = x[in_, ci, r, cc]
                    best_i = r * wd + cc
                    for i in range(window):
                        for j in range(window):
                            v = x[in_, ci, r + i, cc + j]
                            # strict comparison keeps the lowest linear index on ties
                            if v > best:
                                best = v
                                best_i = (r + i) * wd + cc + j
                    y[in_, ci, oh, ow] = best
                    am[in_, ci, oh, ow] = best_i
    return out, idx


def maxpool_backward(const double[:, :, :, ::1] gy, const long long[:, :, :, ::1] argmax,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((n, c, h * w))
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t in_, ci, oh, ow
    for in_ in range(n):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    gx[in_, ci, argmax[in_, ci, oh, ow]] += gy[in_, ci, oh, ow]
    return gx_arr.reshape(n, c, h, w)


def avgpool_forward(const double[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = (h - window) // stride + 1, wo = (wd - window) // stride + 1
    out = np.empty((n, c, ho, wo))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t in_, ci, oh, ow, i, j, r, cc
    cdef double acc, inv = 1.0 / (window * window)
    for in_ in range(n):
        for ci in range(c):
            for oh in range(ho):
                r = oh * stride
                for ow in range(wo):
                    cc = ow * stride
                    acc = 0.0
                    for i in range(window):
                        for j in range(window):
                            acc = acc + x[in_, ci, r + i, cc + j]
                    y[in_, ci, oh, ow] = acc * inv
    return out


def avgpool_backward(const double[:, :, :, ::1] gy, Py_ssize_t h, Py_ssize_t w,
                     Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t in_, ci, oh, ow, i, j, r, cc
    cdef double share, inv = 1.0 / (window * window)
    for in_ in range(n):
        for ci in range(c):
            for oh in range(ho):
                r = oh * stride
                for ow in range(wo):
                    cc = ow * stride
                    share = gy[in_, ci, oh, ow] * inv
                    for i in range(window):
                        for j in range(window):
                            gx[in_, ci, r + i, cc + j] += share
    return gx_arr
