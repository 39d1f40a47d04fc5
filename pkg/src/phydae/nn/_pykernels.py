"""Pure-numpy convolution kernels (fallback backend).

All arrays are NHWC float64. ``xp`` is the already padded input; ``ho`` and
``wo`` are the output extents for the given stride.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def _span(start, stride, count):
    return slice(start, start + stride * (count - 1) + 1, stride)


def im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def col2im(cols, n, hp, wp, c, kh, kw, stride, ho, wo):
    out = np.zeros((n, hp, wp, c))
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, _span(i, stride, ho), _span(j, stride, wo), :] += cols[:, :, :, i, j, :]
    return out


def dw_forward(xp, w, stride, ho, wo):
    kh, kw, c = w.shape
    out = np.zeros((xp.shape[0], ho, wo, c))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, _span(i, stride, ho), _span(j, stride, wo), :] * w[i, j]
    return out


def dw_backward_input(g, w, hp, wp, stride):
    kh, kw, c = w.shape
    n, ho, wo, _ = g.shape
    gxp = np.zeros((n, hp, wp, c))
    for i in range(kh):
        for j in range(kw):
            gxp[:, _span(i, stride, ho), _span(j, stride, wo), :] += g * w[i, j]
    return gxp


def dw_backward_weight(xp, g, kh, kw, stride):
    n, ho, wo, c = g.shape
    gw = np.empty((kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            gw[i, j] = np.einsum("nhwc,nhwc->c", xp[:, _span(i, stride, ho), _span(j, stride, wo), :], g)
    return gw
