"""Pure-numpy convolution kernels (im2col + BLAS).

All functions expect the input to be zero-padded already and contiguous;
`stride` is the only remaining geometry parameter.  Shapes:

    conv1d: x (N, Ci, T),    w (Co, Ci, K)
    conv2d: x (N, Ci, H, W), w (Co, Ci, KH, KW)
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows1d(x, k, stride):
    n, c, t = x.shape
    t_out = (t - k) // stride + 1
    sn, sc, st = x.strides
    return as_strided(x, (n, c, t_out, k), (sn, sc, st * stride, st)), t_out


def conv1d_forward(x, w, stride):
    cols, _ = _windows1d(x, w.shape[2], stride)
    # out[n, co, t] = sum_{ci,k} cols[n, ci, t, k] * w[co, ci, k]
    out = np.tensordot(cols, w, axes=([1, 3], [1, 2]))
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def conv1d_backward(x, w, grad_out, stride):
    k = w.shape[2]
    cols, t_out = _windows1d(x, k, stride)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2], [0, 2]))
    # grad_cols[n, t, ci, k] = sum_co grad_out[n, co, t] * w[co, ci, k]
    grad_cols = np.tensordot(grad_out.transpose(0, 2, 1), w, axes=([2], [0]))
    grad_x = np.zeros_like(x)
    for kk in range(k):
        grad_x[:, :, kk : kk + stride * t_out : stride] += grad_cols[:, :, :, kk].transpose(0, 2, 1)
    return grad_x, np.ascontiguousarray(grad_w)


def _windows2d(x, kh, kw, stride):
    n, c, h, w = x.shape
    h_out = (h - kh) // stride + 1
    w_out = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    shape = (n, c, h_out, w_out, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return as_strided(x, shape, strides), h_out, w_out


def conv2d_forward(x, w, stride):
    cols, _, _ = _windows2d(x, w.shape[2], w.shape[3], stride)
    # out[n, co, i, j] = sum_{ci,kh,kw} cols[n, ci, i, j, kh, kw] * w[co, ci, kh, kw]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad_out, stride):
    kh, kw = w.shape[2], w.shape[3]
    cols, h_out, w_out = _windows2d(x, kh, kw, stride)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_cols = np.tensordot(grad_out.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    grad_x = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            grad_x[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return grad_x, np.ascontiguousarray(grad_w)
