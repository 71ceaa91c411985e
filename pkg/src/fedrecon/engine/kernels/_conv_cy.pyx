# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend: direct-loop convolution and pooling primitives.

Mirrors the contracts of `_conv_np`; results agree up to float64 summation
order. Selected automatically at import when compiled.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "compiled"


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (wid + 2 * pw - kw) // sw + 1
    out_arr = np.zeros((n, co, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, oh, ow, i, j, ih, iw
    cdef double acc
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(kh):
                            ih = oh * sh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * sw + j - pw
                                if iw < 0 or iw >= wid:
                                    continue
                                acc += x[b, c, ih, iw] * w[o, c, i, j]
                    out[b, o, oh, ow] = acc
    return out_arr


def conv2d_dinput(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                  int sh, int sw, int ph, int pw, int h, int wid):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    out_arr = np.zeros((n, ci, h, wid))
    cdef double[:, :, :, ::1] dx = out_arr
    cdef Py_ssize_t b, o, c, oh, ow, i, j, ih, iw
    cdef double g
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = gy[b, o, oh, ow]
                    if g == 0.0:
                        continue
                    for c in range(ci):
                        for i in range(kh):
                            ih = oh * sh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * sw + j - pw
                                if iw < 0 or iw >= wid:
                                    continue
                                dx[b, c, ih, iw] += g * w[o, c, i, j]
    return out_arr


def conv2d_dweight(double[:, :, :, ::1] x, double[:, :, :, ::1] gy,
                   int sh, int sw, int ph, int pw, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    out_arr = np.zeros((co, ci, kh, kw))
    cdef double[:, :, :, ::1] dw = out_arr
    cdef Py_ssize_t b, o, c, oh, ow, i, j, ih, iw
    cdef double g
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = gy[b, o, oh, ow]
                    if g == 0.0:
                        continue
                    for c in range(ci):
                        for i in range(kh):
                            ih = oh * sh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * sw + j - pw
                                if iw < 0 or iw >= wid:
                                    continue
                                dw[o, c, i, j] += g * x[b, c, ih, iw]
    return out_arr


def maxpool_argmax(double[:, :, :, ::1] x, int k, int s):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // s + 1
    cdef Py_ssize_t wo = (w - k) // s + 1
    idx_arr = np.zeros((n, c, ho, wo), dtype=np.int64)
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oh, ow, i, j, bi, bj
    cdef double best, v
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    best = x[b, ch, oh * s, ow * s]
                    bi = oh * s
                    bj = ow * s
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oh * s + i, ow * s + j]
                            if v > best:
                                best = v
                                bi = oh * s + i
                                bj = ow * s + j
                    idx[b, ch, oh, ow] = bi * w + bj
    return idx_arr


def pool_take(double[:, :, :, ::1] x, long long[:, :, :, ::1] idx):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = idx.shape[2], wo = idx.shape[3]
    out_arr = np.zeros((n, c, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, ow
    cdef long long f
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    f = idx[b, ch, oh, ow]
                    out[b, ch, oh, ow] = x[b, ch, f // w, f % w]
    return out_arr


def pool_scatter(double[:, :, :, ::1] g, long long[:, :, :, ::1] idx, int h, int w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    out_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, ow
    cdef long long f
    for b in range(n):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    f = idx[b, ch, oh, ow]
                    out[b, ch, f // w, f % w] += g[b, ch, oh, ow]
    return out_arr
