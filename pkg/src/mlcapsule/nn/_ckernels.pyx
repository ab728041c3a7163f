# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same contracts as ``_pykernels``; callers validate shapes."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from scipy.linalg.cython_blas cimport sgemm, sgemv

cnp.import_array()

NAME = "native"


def dense(const float[::1] x, const float[:, ::1] w, const float[::1] b):
    cdef int m = w.shape[0], n = w.shape[1], one = 1
    cdef float alpha = 1.0, beta = 1.0
    cdef char trans = b'T'
    out = np.array(b, dtype=np.float32, copy=True)
    cdef float[::1] y = out
    if m and n:
        # row-major w is column-major w^T; y = (w^T)^T x + y
        sgemv(&trans, &n, &m, &alpha, <float*>&w[0, 0], &n, <float*>&x[0], &one,
              &beta, &y[0], &one)
    return out


cdef void _im2col(const float[:, :, ::1] x, float[:, ::1] cols, int kh, int kw,
                  int stride, int ph, int pw, int ho, int wo) noexcept nogil:
    cdef int C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int c, i, j, oy, ox, iy, ix, row
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for oy in range(ho):
                    iy = oy * stride + i - ph
                    for ox in range(wo):
                        ix = ox * stride + j - pw
                        if 0 <= iy < H and 0 <= ix < W:
                            cols[row, oy * wo + ox] = x[c, iy, ix]
                        else:
                            cols[row, oy * wo + ox] = 0.0


def conv2d(const float[:, :, ::1] x, const float[:, :, :, ::1] w, const float[::1] b,
           int stride, int ph, int pw):
    cdef int F = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = (x.shape[1] + 2 * ph - kh) // stride + 1
    cdef int wo = (x.shape[2] + 2 * pw - kw) // stride + 1
    cdef int K = C * kh * kw, P = ho * wo, f, p
    cdef float alpha = 1.0, beta = 1.0
    cdef char nt = b'N'
    cols_arr = np.empty((K, P), dtype=np.float32)
    cdef float[:, ::1] cols = cols_arr
    out_arr = np.empty((F, ho, wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    with nogil:
        _im2col(x, cols, kh, kw, stride, ph, pw, ho, wo)
        for f in range(F):
            for p in range(P):
                out[f, p // wo, p % wo] = b[f]
        if F and P and K:
            # out (F x P, row-major) = w (F x K) @ cols (K x P); in column-major terms
            # out^T = cols^T w^T with leading dims P and K.
            sgemm(&nt, &nt, &P, &F, &K, &alpha, &cols[0, 0], &P, <float*>&w[0, 0, 0, 0], &K,
                  &beta, &out[0, 0, 0], &P)
    return out_arr


def depthwise_conv2d(const float[:, :, ::1] x, const float[:, :, ::1] w, const float[::1] b,
                     int stride, int ph, int pw):
    cdef int C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int kh = w.shape[1], kw = w.shape[2]
    cdef int ho = (H + 2 * ph - kh) // stride + 1
    cdef int wo = (W + 2 * pw - kw) // stride + 1
    cdef int c, oy, ox, i, j, iy, ix
    cdef double acc
    out_arr = np.empty((C, ho, wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    with nogil:
        for c in range(C):
            for oy in range(ho):
                for ox in range(wo):
                    acc = b[c]
                    for i in range(kh):
                        iy = oy * stride + i - ph
                        if iy < 0 or iy >= H:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pw
                            if 0 <= ix < W:
                                acc += x[c, iy, ix] * w[c, i, j]
                    out[c, oy, ox] = <float>acc
    return out_arr


def maxpool2d(const float[:, :, ::1] x, int size, int stride):
    cdef int C = x.shape[0]
    cdef int ho = (x.shape[1] - size) // stride + 1
    cdef int wo = (x.shape[2] - size) // stride + 1
    cdef int c, oy, ox, i, j
    cdef float m, v
    out_arr = np.empty((C, ho, wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    with nogil:
        for c in range(C):
            for oy in range(ho):
                for ox in range(wo):
                    m = x[c, oy * stride, ox * stride]
                    for i in range(size):
                        for j in range(size):
                            v = x[c, oy * stride + i, ox * stride + j]
                            if v > m:
                                m = v
                    out[c, oy, ox] = m
    return out_arr


def min_sq_distance(const float[:, ::1] points, const float[::1] q):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], i, k
    cdef double best = INFINITY, acc, t
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(d):
                t = points[i, k] - q[k]
                acc += t * t
                if acc >= best:
                    break
            if acc < best:
                best = acc
    return best
