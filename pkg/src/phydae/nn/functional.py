"""Differentiable operators on NHWC tensors.

Each operator computes its forward result with numpy and registers a fused
backward rule. Spatial operators preserve extents through reflect padding
unless ``padding="valid"`` is requested.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make, unbroadcast

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


# ----------------------------------------------------------------------
# elementwise nonlinearities
# ----------------------------------------------------------------------
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(out, (x,), lambda g: (g * sig,), "softplus")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + _GELU_C * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make(out, (x,), backward, "gelu")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return make(out, (x,), lambda g: (g * mask,), "clip")


def maximum(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data >= floor
    return make(np.maximum(x.data, floor), (x,), lambda g: (g * mask,), "maximum")


# ----------------------------------------------------------------------
# normalisation and probability maps
# ----------------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), backward, "log_softmax")


def logsumexp(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(x) * mask)) along ``axis``; ``mask`` is a constant 0/1 array."""
    x = as_tensor(x)
    m = np.ones_like(x.data) if mask is None else np.asarray(mask, dtype=np.float64)
    shift = np.where(m > 0, x.data, -np.inf).max(axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(x.data - shift) * m
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + shift).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * e / s,)

    return make(out, (x,), backward, "logsumexp")


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """GroupNorm over NHWC input; statistics per (sample, channel group)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, h, w, groups, c // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, h, w, c)
    out = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 1, 2))
        gbeta = g.sum(axis=(0, 1, 2))
        gx_hat = (g * gamma.data).reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        m1 = gx_hat.mean(axis=(1, 2, 4), keepdims=True)
        m2 = (gx_hat * xh).mean(axis=(1, 2, 4), keepdims=True)
        gx = (inv * (gx_hat - m1 - xh * m2)).reshape(n, h, w, c)
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), backward, "group_norm")


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` shaped (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return make(out, parents, backward, "linear")


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
def _pad_amounts(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def pad_nhwc(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int], mode: str) -> np.ndarray:
    if mode == "valid" or (ph == (0, 0) and pw == (0, 0)):
        return np.ascontiguousarray(x)
    np_mode = {"reflect": "reflect", "zeros": "constant"}[mode]
    return np.pad(x, ((0, 0), ph, pw, (0, 0)), mode=np_mode)


def unpad_nhwc(gp: np.ndarray, h: int, w: int, ph, pw, mode: str) -> np.ndarray:
    """Adjoint of ``pad_nhwc``: fold gradients of padded cells back onto sources."""
    if mode == "valid" or (ph == (0, 0) and pw == (0, 0)):
        return gp
    g = gp
    if mode == "reflect":
        # fold columns first, then rows; numpy 'reflect' excludes the edge sample
        top, bottom = ph
        left, right = pw
        g = g.copy()
        for m in range(1, left + 1):
            g[:, :, left + m, :] += g[:, :, left - m, :]
        for m in range(1, right + 1):
            g[:, :, left + w - 1 - m, :] += g[:, :, left + w - 1 + m, :]
        for m in range(1, top + 1):
            g[:, top + m, :, :] += g[:, top - m, :, :]
        for m in range(1, bottom + 1):
            g[:, top + h - 1 - m, :, :] += g[:, top + h - 1 + m, :, :]
    return np.ascontiguousarray(g[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :])


def conv2d(x, w, b=None, stride: int = 1, groups: int = 1, padding: str = "reflect") -> Tensor:
    """Grouped 2-D cross-correlation.

    x: (N, H, W, Cin); w: (kh, kw, Cin // groups, Cout). With reflect or zero
    padding the output extent is ceil(H / stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    n, h, wd, cin = x.shape
    kh, kw, cg, cout = w.shape
    if cin % groups or cout % groups or cg != cin // groups:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, groups={groups}")
    if padding == "valid":
        ph = pw = (0, 0)
    else:
        ph, pw = _pad_amounts(kh), _pad_amounts(kw)
        if padding == "reflect" and (max(ph) >= h or max(pw) >= wd):
            raise ValueError(f"input {h}x{wd} too small for reflect padding of a {kh}x{kw} kernel")
    xp = pad_nhwc(x.data, ph, pw, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"input {h}x{wd} smaller than kernel {kh}x{kw}")

    depthwise = groups == cin == cout and cg == 1
    pointwise = kh == kw == 1 and stride == 1 and groups == 1
    og = cout // groups

    if depthwise:
        w3 = np.ascontiguousarray(w.data[:, :, 0, :])
        out = kernels.dw_forward(xp, w3, stride, ho, wo)
    elif pointwise:
        out = (xp.reshape(-1, cin) @ w.data[0, 0]).reshape(n, ho, wo, cout)
        cols = None
    else:
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
        if groups == 1:
            out = (cols @ w.data.reshape(kh * kw * cin, cout)).reshape(n, ho, wo, cout)
        else:
            cols_g = cols.reshape(-1, kh * kw, groups, cg).transpose(2, 0, 1, 3).reshape(groups, -1, kh * kw * cg)
            w_g = w.data.reshape(kh * kw, cg, groups, og).transpose(2, 0, 1, 3).reshape(groups, kh * kw * cg, og)
            out = np.matmul(cols_g, w_g).transpose(1, 0, 2).reshape(n, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if depthwise:
            if w.requires_grad:
                gw = kernels.dw_backward_weight(xp, g, kh, kw, stride)[:, :, None, :]
            if x.requires_grad:
                gxp = kernels.dw_backward_input(g, w3, hp, wp, stride)
                gx = unpad_nhwc(gxp, h, wd, ph, pw, padding)
        elif pointwise:
            g2 = g.reshape(-1, cout)
            if w.requires_grad:
                gw = (xp.reshape(-1, cin).T @ g2)[None, None]
            if x.requires_grad:
                gx = (g2 @ w.data[0, 0].T).reshape(x.shape)
        else:
            g2 = g.reshape(-1, cout)
            if groups == 1:
                wmat = w.data.reshape(kh * kw * cin, cout)
                if w.requires_grad:
                    gw = (cols.T @ g2).reshape(w.shape)
                if x.requires_grad:
                    gcols = g2 @ wmat.T
            else:
                g_g = g2.reshape(-1, groups, og).transpose(1, 0, 2)
                if w.requires_grad:
                    gw_g = np.matmul(cols_g.transpose(0, 2, 1), g_g)
                    gw = gw_g.reshape(groups, kh * kw, cg, og).transpose(1, 2, 0, 3).reshape(w.shape)
                if x.requires_grad:
                    gcols_g = np.matmul(g_g, w_g.transpose(0, 2, 1))
                    gcols = gcols_g.reshape(groups, -1, kh * kw, cg).transpose(1, 2, 0, 3).reshape(-1, kh * kw * cin)
            if x.requires_grad:
                gxp = kernels.col2im(np.ascontiguousarray(gcols), n, hp, wp, cin, kh, kw, stride, ho, wo)
                gx = unpad_nhwc(gxp, h, wd, ph, pw, padding)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make(out, parents, backward, "conv2d")


def depthwise_filter(x, kernel: np.ndarray, padding: str = "reflect") -> Tensor:
    """Apply one fixed 2-D kernel to every channel (no learnable weight)."""
    x = as_tensor(x)
    k = np.asarray(kernel, dtype=np.float64)
    c = x.shape[-1]
    w = np.repeat(k[:, :, None, None], c, axis=3)
    return conv2d(x, Tensor(w), groups=c, padding=padding)


# ----------------------------------------------------------------------
# pooling and resampling
# ----------------------------------------------------------------------
def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool2d(x, out_hw: tuple[int, int]) -> Tensor:
    """Mean over adaptive bins (floor start, ceil end) covering the input."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"pool target {out_hw} exceeds input extents {(h, w)}")
    rb, cb = _bins(h, oh), _bins(w, ow)
    out = np.empty((n, oh, ow, c))
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, i, j, :] = x.data[:, r0:r1, c0:c1, :].mean(axis=(1, 2))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                gx[:, r0:r1, c0:c1, :] += g[:, i:i + 1, j:j + 1, :] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return make(out, (x,), backward, "adaptive_avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    return as_tensor(x).mean(axis=(1, 2))


def upsample2x(x, size: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour 2x upsampling, optionally cropped to ``size``."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    th, tw = size if size is not None else (2 * h, 2 * w)
    up = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)[:, :th, :tw, :]

    def backward(g):
        gp = np.zeros((n, 2 * h, 2 * w, c))
        gp[:, :th, :tw, :] = g
        return (gp.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return make(np.ascontiguousarray(up), (x,), backward, "upsample2x")


# ----------------------------------------------------------------------
# indexing, sorting, selection
# ----------------------------------------------------------------------
def take_rows(x, idx) -> Tensor:
    """Gather along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make(x.data[idx], (x,), backward, "take_rows")


def scatter_rows(x, idx, n: int) -> Tensor:
    """Place rows of ``x`` at positions ``idx`` of a zero tensor with ``n`` rows."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, idx, x.data)
    return make(out, (x,), lambda g: (g[idx],), "scatter_rows")


def sort_rows(x) -> Tensor:
    """Sort along axis 0; the gradient follows the sorting permutation."""
    x = as_tensor(x)
    order = np.argsort(x.data, axis=0, kind="stable")
    out = np.take_along_axis(x.data, order, axis=0)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, order, g, axis=0)
        return (gx,)

    return make(out, (x,), backward, "sort_rows")


def topk_mean(x, m: int, axis: int = 1) -> Tensor:
    """Mean of the ``m`` largest entries along ``axis``."""
    x = as_tensor(x)
    if not 1 <= m <= x.shape[axis]:
        raise ValueError(f"m={m} outside [1, {x.shape[axis]}]")
    idx = np.argpartition(x.data, -m, axis=axis)
    idx = np.take(idx, np.arange(x.shape[axis] - m, x.shape[axis]), axis=axis)
    vals = np.take_along_axis(x.data, idx, axis=axis)
    out = vals.mean(axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.broadcast_to(np.expand_dims(g, axis) / m, idx.shape), axis=axis)
        return (gx,)

    return make(out, (x,), backward, "topk_mean")


# ----------------------------------------------------------------------
# spectral operators (orthonormal 2-D DFT over the spatial axes)
# ----------------------------------------------------------------------
def spectral_energy(x, weight: np.ndarray) -> Tensor:
    """Per-sample sum of ``weight * |DFT(x)|^2`` over (H, W, C).

    ``weight`` is a real (H, W) map on the unshifted frequency grid.
    """
    x = as_tensor(x)
    wmap = np.asarray(weight, dtype=np.float64)[None, :, :, None]
    spec = np.fft.fft2(x.data, axes=(1, 2), norm="ortho")
    out = (wmap * (spec.real ** 2 + spec.imag ** 2)).sum(axis=(1, 2, 3))

    def backward(g):
        back = np.fft.ifft2(wmap * spec, axes=(1, 2), norm="ortho").real
        return (2.0 * g[:, None, None, None] * back,)

    return make(out, (x,), backward, "spectral_energy")


def fft_magnitude(x, eps: float = 1e-12) -> Tensor:
    """Smoothed magnitude sqrt(|DFT(x)|^2 + eps) over the spatial axes."""
    x = as_tensor(x)
    spec = np.fft.fft2(x.data, axes=(1, 2), norm="ortho")
    mag = np.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)

    def backward(g):
        return (np.fft.ifft2(g * spec / mag, axes=(1, 2), norm="ortho").real,)

    return make(mag, (x,), backward, "fft_magnitude")


# ----------------------------------------------------------------------
# misc
# ----------------------------------------------------------------------
def cos(x) -> Tensor:
    x = as_tensor(x)
    return make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def sin(x) -> Tensor:
    x = as_tensor(x)
    return make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def avg_pool(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols that do not fill
    a block are dropped."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ValueError(f"input {h}x{w} smaller than pooling block {k}")
    out = x.data[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :ho * k, :wo * k, :] = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (gx,)

    return make(out, (x,), backward, "avg_pool")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make(out, (x,), backward, "l2_normalize")


def snap(x, bits: int = 40) -> Tensor:
    """Round to the 2**-bits grid with an identity (straight-through) gradient.

    Sums and differences of snapped values in [-1, 1] are exact in float64.
    """
    x = as_tensor(x)
    scale = float(2 ** bits)
    return make(np.rint(x.data * scale) / scale, (x,), lambda g: (g,), "snap")
