"""Pure numpy implementations of the convolution and pooling kernels.

Layout is NCHW, dtype float64. Every function here has a twin with the same
signature in the compiled ``_kernels`` extension.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def _out_size(size, window, stride):
    return (size - window) // stride + 1


def _windows(x, window, stride):
    # (N, C, Ho, Wo, window, window) strided view, no copy
    v = sliding_window_view(x, (window, window), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d_forward(x, w, b, stride):
    cols = _windows(x, w.shape[2], stride)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, gy, stride):
    k = w.shape[2]
    n, c, h, wd = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols = _windows(x, k, stride)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, k, k)
    gb = gy.sum(axis=(0, 2, 3))
    gx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return gx, np.ascontiguousarray(gw), gb


def maxpool_forward(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, window, stride), _out_size(w, window, stride)
    win = _windows(x, window, stride).reshape(n, c, ho, wo, window * window)
    local = np.argmax(win, axis=-1)  # first occurrence: lowest linear index
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    argmax = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(y), argmax


def maxpool_backward(gy, argmax, h, w):
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w))
    flat = argmax.reshape(n, c, -1)
    np.add.at(
        gx,
        (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat),
        gy.reshape(n, c, -1),
    )
    return gx.reshape(n, c, h, w)


def avgpool_forward(x, window, stride):
    return np.ascontiguousarray(_windows(x, window, stride).mean(axis=(4, 5)))


def avgpool_backward(gy, h, w, window, stride):
    n, c, ho, wo = gy.shape
    gx = np.zeros((n, c, h, w))
    share = gy / (window * window)
    for i in range(window):
        for j in range(window):
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
    return gx
