# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-loop kernels for float and int8 convolution / linear layers.

Float kernels accumulate in double; integer kernels accumulate in int64 and
leave range checks to the caller.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_f32(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
               const float[::1] b, int stride, int padding):
    cdef Py_ssize_t n_batch = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1
    out = np.empty((n_batch, c_out, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, i, j, c, p, q, r, s
    cdef double acc
    with nogil:
        for n in range(n_batch):
            for o in range(c_out):
                for i in range(oh):
                    for j in range(ow):
                        acc = b[o]
                        for c in range(c_in):
                            for p in range(kh):
                                r = i * stride + p - padding
                                if r < 0 or r >= h:
                                    continue
                                for q in range(kw):
                                    s = j * stride + q - padding
                                    if s < 0 or s >= wd:
                                        continue
                                    acc = acc + <double>x[n, c, r, s] * <double>w[o, c, p, q]
                        y[n, o, i, j] = <float>acc
    return out


def linear_f32(const float[:, ::1] x, const float[:, ::1] w, const float[::1] b):
    cdef Py_ssize_t n_batch = x.shape[0], f_in = x.shape[1], f_out = w.shape[0]
    out = np.empty((n_batch, f_out), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef Py_ssize_t n, o, k
    cdef double acc
    with nogil:
        for n in range(n_batch):
            for o in range(f_out):
                acc = b[o]
                for k in range(f_in):
                    acc = acc + <double>x[n, k] * <double>w[o, k]
                y[n, o] = <float>acc
    return out


def conv2d_q(const cnp.uint8_t[:, :, :, ::1] xq, long x_zp,
             const cnp.int8_t[:, :, :, ::1] wq, const cnp.int32_t[::1] bias_q,
             int stride, int padding):
    cdef Py_ssize_t n_batch = xq.shape[0], c_in = xq.shape[1]
    cdef Py_ssize_t h = xq.shape[2], wd = xq.shape[3]
    cdef Py_ssize_t c_out = wq.shape[0], kh = wq.shape[2], kw = wq.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1
    out = np.empty((n_batch, c_out, oh, ow), dtype=np.int64)
    cdef cnp.int64_t[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, i, j, c, p, q, r, s
    cdef cnp.int64_t acc
    with nogil:
        for n in range(n_batch):
            for o in range(c_out):
                for i in range(oh):
                    for j in range(ow):
                        acc = bias_q[o]
                        for c in range(c_in):
                            for p in range(kh):
                                r = i * stride + p - padding
                                if r < 0 or r >= h:
                                    continue
                                for q in range(kw):
                                    s = j * stride + q - padding
                                    if s < 0 or s >= wd:
                                        continue
                                    acc = acc + (<cnp.int64_t>xq[n, c, r, s] - x_zp) * <cnp.int64_t>wq[o, c, p, q]
                        y[n, o, i, j] = acc
    return out


def linear_q(const cnp.uint8_t[:, ::1] xq, long x_zp,
             const cnp.int8_t[:, ::1] wq, const cnp.int32_t[::1] bias_q):
    cdef Py_ssize_t n_batch = xq.shape[0], f_in = xq.shape[1], f_out = wq.shape[0]
    out = np.empty((n_batch, f_out), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] y = out
    cdef Py_ssize_t n, o, k
    cdef cnp.int64_t acc
    with nogil:
        for n in range(n_batch):
            for o in range(f_out):
                acc = bias_q[o]
                for k in range(f_in):
                    acc = acc + (<cnp.int64_t>xq[n, k] - x_zp) * <cnp.int64_t>wq[o, k]
                y[n, o] = acc
    return out
