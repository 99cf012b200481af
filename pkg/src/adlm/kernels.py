"""Hot numeric kernels: 2-D convolution and cross-channel response normalization.

Every kernel exists twice: a loop implementation compiled with numba and a
vectorized numpy implementation. The public functions dispatch on
``adlm._accel.USE_NUMBA``; the ``*_numba`` / ``*_numpy`` variants are exported
for the benchmark and the cross-backend tests. Loop orders are fixed, so each
backend is bit-reproducible run to run. The two backends agree to rounding
error, not bit for bit.

Shapes follow NCHW. Inputs to the convolution kernels are already padded.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adlm import _accel
from adlm._accel import njit


# ---------------------------------------------------------------------------
# convolution, numpy path
# ---------------------------------------------------------------------------


def _windows(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x, w, stride=1):
    k = w.shape[2]
    win = _windows(x, k, stride)  # (N, C, Ho, Wo, k, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input_numpy(gout, w, in_shape, stride=1):
    n, c, h, wd = in_shape
    k = w.shape[2]
    ho, wo = gout.shape[2], gout.shape[3]
    gx = np.zeros(in_shape)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gout, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    return gx


def conv2d_backward_weight_numpy(gout, x, k, stride=1):
    win = _windows(x, k, stride)
    return np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)


# ---------------------------------------------------------------------------
# convolution, numba path
# ---------------------------------------------------------------------------


@njit
def conv2d_forward_numba(x, w, stride=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for i in range(k):
                    for j in range(k):
                        wv = w[oc, ic, i, j]
                        for r in range(ho):
                            row = r * stride + i
                            for s in range(wo):
                                out[b, oc, r, s] += x[b, ic, row, s * stride + j] * wv
    return out


@njit
def conv2d_backward_input_numba(gout, w, in_shape, stride=1):
    n, c, h, wd = in_shape
    o, _, k, _ = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gx = np.zeros((n, c, h, wd))
    for b in range(n):
        for ic in range(c):
            for oc in range(o):
                for i in range(k):
                    for j in range(k):
                        wv = w[oc, ic, i, j]
                        for r in range(ho):
                            row = r * stride + i
                            for s in range(wo):
                                gx[b, ic, row, s * stride + j] += gout[b, oc, r, s] * wv
    return gx


@njit
def conv2d_backward_weight_numba(gout, x, k, stride=1):
    n, c = x.shape[0], x.shape[1]
    o, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    gw = np.zeros((o, c, k, k))
    for oc in range(o):
        for ic in range(c):
            for i in range(k):
                for j in range(k):
                    acc = 0.0
                    for b in range(n):
                        for r in range(ho):
                            row = r * stride + i
                            for s in range(wo):
                                acc += gout[b, oc, r, s] * x[b, ic, row, s * stride + j]
                    gw[oc, ic, i, j] = acc
    return gw


# ---------------------------------------------------------------------------
# cross-channel response normalization
#   out = h / max(h, (q + alpha * sum_{window} h_m^2) ** beta)
# ---------------------------------------------------------------------------


def _channel_window_sum_numpy(v, half):
    # sum over channels m in [max(0, k-half), min(N-1, k+half)] along axis 1
    n_ch = v.shape[1]
    csum = np.cumsum(v, axis=1)
    csum = np.concatenate([np.zeros_like(v[:, :1]), csum], axis=1)
    hi = np.minimum(np.arange(n_ch) + half, n_ch - 1) + 1
    lo = np.maximum(np.arange(n_ch) - half, 0)
    return csum[:, hi] - csum[:, lo]


def lrn_conv_forward_numpy(h, q, size, alpha, beta):
    half = size // 2
    base = q + alpha * _channel_window_sum_numpy(h * h, half)
    s = base ** beta
    return h / np.maximum(h, s), base


def lrn_conv_backward_numpy(h, gout, base, q, size, alpha, beta):
    half = size // 2
    s = base ** beta
    active = h < s
    t = np.where(active, gout * h * base ** (beta - 1.0) / (s * s), 0.0)
    return np.where(active, gout / s, 0.0) - 2.0 * alpha * beta * h * _channel_window_sum_numpy(t, half)


@njit
def lrn_conv_forward_numba(h, q, size, alpha, beta):
    n, c, hh, ww = h.shape
    half = size // 2
    out = np.empty_like(h)
    base = np.empty_like(h)
    for b in range(n):
        for k in range(c):
            acc = np.zeros((hh, ww))
            for m in range(max(0, k - half), min(c - 1, k + half) + 1):
                for r in range(hh):
                    for s_ in range(ww):
                        v = h[b, m, r, s_]
                        acc[r, s_] += v * v
            for r in range(hh):
                for s_ in range(ww):
                    bs = q + alpha * acc[r, s_]
                    base[b, k, r, s_] = bs
                    hv = h[b, k, r, s_]
                    out[b, k, r, s_] = hv / max(hv, bs ** beta)
    return out, base


@njit
def lrn_conv_backward_numba(h, gout, base, q, size, alpha, beta):
    n, c, hh, ww = h.shape
    half = size // 2
    gin = np.empty_like(h)
    t = np.empty((c, hh, ww))
    for b in range(n):
        for k in range(c):
            for r in range(hh):
                for s_ in range(ww):
                    bs = base[b, k, r, s_]
                    sk = bs ** beta
                    hv = h[b, k, r, s_]
                    t[k, r, s_] = gout[b, k, r, s_] * hv * bs ** (beta - 1.0) / (sk * sk) if hv < sk else 0.0
        for m in range(c):
            acc = np.zeros((hh, ww))
            for k in range(max(0, m - half), min(c - 1, m + half) + 1):
                for r in range(hh):
                    for s_ in range(ww):
                        acc[r, s_] += t[k, r, s_]
            for r in range(hh):
                for s_ in range(ww):
                    sm = base[b, m, r, s_] ** beta
                    hv = h[b, m, r, s_]
                    direct = gout[b, m, r, s_] / sm if hv < sm else 0.0
                    gin[b, m, r, s_] = direct - 2.0 * alpha * beta * hv * acc[r, s_]
    return gin


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv2d_forward(x, w, stride=1):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _accel.USE_NUMBA:
        return conv2d_forward_numba(x, w, stride)
    return conv2d_forward_numpy(x, w, stride)


def conv2d_backward_input(gout, w, in_shape, stride=1):
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    if _accel.USE_NUMBA:
        return conv2d_backward_input_numba(gout, np.ascontiguousarray(w), tuple(in_shape), stride)
    return conv2d_backward_input_numpy(gout, w, tuple(in_shape), stride)


def conv2d_backward_weight(gout, x, k, stride=1):
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _accel.USE_NUMBA:
        return conv2d_backward_weight_numba(gout, x, k, stride)
    return conv2d_backward_weight_numpy(gout, x, k, stride)


def lrn_conv_forward(h, q, size, alpha, beta):
    h = np.ascontiguousarray(h, dtype=np.float64)
    if _accel.USE_NUMBA:
        return lrn_conv_forward_numba(h, float(q), int(size), float(alpha), float(beta))
    return lrn_conv_forward_numpy(h, q, size, alpha, beta)


def lrn_conv_backward(h, gout, base, q, size, alpha, beta):
    args = (np.ascontiguousarray(h), np.ascontiguousarray(gout, dtype=np.float64), np.ascontiguousarray(base))
    if _accel.USE_NUMBA:
        return lrn_conv_backward_numba(*args, float(q), int(size), float(alpha), float(beta))
    return lrn_conv_backward_numpy(*args, q, size, alpha, beta)
