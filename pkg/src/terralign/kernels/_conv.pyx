# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Same contract as `numpy_backend`: inputs are pre-padded and contiguous.
Data is repacked channels-last so each output element reduces to plain dot
products / axpy updates over contiguous runs, which the C compiler
vectorizes.  Kernels are deliberately single-threaded: they share the
process with BLAS-backed numpy ops and spinning worker pools would fight
over the same cores; serial loops also keep results bit-deterministic.
"""

import numpy as np

ctypedef fused floating:
    float
    double


def conv1d_forward(floating[:, :, ::1] x, floating[:, :, ::1] w, int stride):
    cdef Py_ssize_t n_b = x.shape[0], ci_n = x.shape[1], t_in = x.shape[2]
    cdef Py_ssize_t co_n = w.shape[0], k_n = w.shape[2]
    cdef Py_ssize_t t_out = (t_in - k_n) // stride + 1
    cdef Py_ssize_t run = k_n * ci_n
    xt_np = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 1))   # (N, T, Ci)
    wt_np = np.ascontiguousarray(np.asarray(w).transpose(0, 2, 1))   # (Co, K, Ci)
    out_np = np.empty((n_b, co_n, t_out), dtype=np.asarray(x).dtype)
    cdef floating[:, :, ::1] xt = xt_np
    cdef floating[:, :, ::1] wt = wt_np
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t n, co, t, m
    cdef floating acc
    cdef const floating* xrow
    cdef const floating* wrow
    with nogil:
        for n in range(n_b):
            for t in range(t_out):
                xrow = &xt[n, t * stride, 0]
                for co in range(co_n):
                    wrow = &wt[co, 0, 0]
                    acc = 0
                    for m in range(run):
                        acc = acc + wrow[m] * xrow[m]
                    out[n, co, t] = acc
    return out_np


def conv1d_backward(floating[:, :, ::1] x, floating[:, :, ::1] w,
                    floating[:, :, ::1] grad_out, int stride):
    cdef Py_ssize_t n_b = x.shape[0], ci_n = x.shape[1], t_in = x.shape[2]
    cdef Py_ssize_t co_n = w.shape[0], k_n = w.shape[2]
    cdef Py_ssize_t t_out = grad_out.shape[2]
    cdef Py_ssize_t run = k_n * ci_n
    dtype = np.asarray(x).dtype
    xt_np = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 1))
    wt_np = np.ascontiguousarray(np.asarray(w).transpose(0, 2, 1))
    gxt_np = np.zeros((n_b, t_in, ci_n), dtype=dtype)
    gwt_np = np.zeros((co_n, k_n, ci_n), dtype=dtype)
    cdef floating[:, :, ::1] xt = xt_np
    cdef floating[:, :, ::1] wt = wt_np
    cdef floating[:, :, ::1] gxt = gxt_np
    cdef floating[:, :, ::1] gwt = gwt_np
    cdef floating[:, :, ::1] gout = grad_out
    cdef Py_ssize_t n, co, t, m
    cdef floating g
    cdef floating* gxrow
    cdef floating* gwrow
    cdef const floating* xrow
    cdef const floating* wrow
    with nogil:
        for n in range(n_b):
            for t in range(t_out):
                gxrow = &gxt[n, t * stride, 0]
                xrow = &xt[n, t * stride, 0]
                for co in range(co_n):
                    g = gout[n, co, t]
                    wrow = &wt[co, 0, 0]
                    gwrow = &gwt[co, 0, 0]
                    for m in range(run):
                        gxrow[m] += g * wrow[m]
                        gwrow[m] += g * xrow[m]
    grad_x = np.ascontiguousarray(gxt_np.transpose(0, 2, 1))
    grad_w = np.ascontiguousarray(gwt_np.transpose(0, 2, 1))
    return grad_x, grad_w


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n_b = x.shape[0], ci_n = x.shape[1]
    cdef Py_ssize_t h_in = x.shape[2], w_in = x.shape[3]
    cdef Py_ssize_t co_n = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h_out = (h_in - kh) // stride + 1
    cdef Py_ssize_t w_out = (w_in - kw) // stride + 1
    cdef Py_ssize_t run = kw * ci_n
    xt_np = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))   # (N, H, W, Ci)
    wt_np = np.ascontiguousarray(np.asarray(w).transpose(0, 2, 3, 1))   # (Co, KH, KW, Ci)
    out_np = np.empty((n_b, co_n, h_out, w_out), dtype=np.asarray(x).dtype)
    cdef floating[:, :, :, ::1] xt = xt_np
    cdef floating[:, :, :, ::1] wt = wt_np
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t n, co, i, j, p, m
    cdef floating acc
    cdef const floating* xrow
    cdef const floating* wrow
    with nogil:
        for n in range(n_b):
            for i in range(h_out):
                for j in range(w_out):
                    for co in range(co_n):
                        acc = 0
                        for p in range(kh):
                            xrow = &xt[n, i * stride + p, j * stride, 0]
                            wrow = &wt[co, p, 0, 0]
                            for m in range(run):
                                acc = acc + wrow[m] * xrow[m]
                        out[n, co, i, j] = acc
    return out_np


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] grad_out, int stride):
    cdef Py_ssize_t n_b = x.shape[0], ci_n = x.shape[1]
    cdef Py_ssize_t h_in = x.shape[2], w_in = x.shape[3]
    cdef Py_ssize_t co_n = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h_out = grad_out.shape[2], w_out = grad_out.shape[3]
    cdef Py_ssize_t run = kw * ci_n
    dtype = np.asarray(x).dtype
    xt_np = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
    wt_np = np.ascontiguousarray(np.asarray(w).transpose(0, 2, 3, 1))
    gxt_np = np.zeros((n_b, h_in, w_in, ci_n), dtype=dtype)
    gwt_np = np.zeros((co_n, kh, kw, ci_n), dtype=dtype)
    cdef floating[:, :, :, ::1] xt = xt_np
    cdef floating[:, :, :, ::1] wt = wt_np
    cdef floating[:, :, :, ::1] gxt = gxt_np
    cdef floating[:, :, :, ::1] gwt = gwt_np
    cdef floating[:, :, :, ::1] gout = grad_out
    cdef Py_ssize_t n, co, i, j, p, m
    cdef floating g
    cdef floating* gxrow
    cdef floating* gwrow
    cdef const floating* xrow
    cdef const floating* wrow
    with nogil:
        for n in range(n_b):
            for i in range(h_out):
                for j in range(w_out):
                    for co in range(co_n):
                        g = gout[n, co, i, j]
                        for p in range(kh):
                            gxrow = &gxt[n, i * stride + p, j * stride, 0]
                            xrow = &xt[n, i * stride + p, j * stride, 0]
                            wrow = &wt[co, p, 0, 0]
                            gwrow = &gwt[co, p, 0, 0]
                            for m in range(run):
                                gxrow[m] += g * wrow[m]
                                gwrow[m] += g * xrow[m]
    grad_x = np.ascontiguousarray(gxt_np.transpose(0, 3, 1, 2))
    grad_w = np.ascontiguousarray(gwt_np.transpose(0, 3, 1, 2))
    return grad_x, grad_w
