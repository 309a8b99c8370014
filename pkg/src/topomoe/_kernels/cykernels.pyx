# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: valid 1-d convolution (forward + both adjoints)
and windowed-sinc resampling.  The resampler is the clear win over numpy;
the conv loops lose to im2col + BLAS at these shapes (see the benchmark)
and are kept for parity testing and BLAS-less environments."""

import numpy as np

cimport cython
from libc.math cimport cos, fabs, floor, sin, M_PI

ctypedef fused floating:
    float
    double

BACKEND = "compiled"


def conv1d_forward(floating[:, :, ::1] x, floating[:, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1], t_in = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kernel = w.shape[2]
    cdef Py_ssize_t t_out = (t_in - kernel) // stride + 1
    if floating is float:
        out_np = np.zeros((n, c_out, t_out), dtype=np.float32)
    else:
        out_np = np.zeros((n, c_out, t_out), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t i, d, c, o, k, base
    cdef floating acc
    with nogil:
        for i in range(n):
            for d in range(c_out):
                for o in range(t_out):
                    base = o * stride
                    acc = 0
                    for c in range(c_in):
                        for k in range(kernel):
                            acc = acc + x[i, c, base + k] * w[d, c, k]
                    out[i, d, o] = acc
    return out_np


def conv1d_grad_input(floating[:, :, ::1] g, floating[:, :, ::1] w, int stride, int t_in):
    cdef Py_ssize_t n = g.shape[0], c_out = g.shape[1], t_out = g.shape[2]
    cdef Py_ssize_t c_in = w.shape[1], kernel = w.shape[2]
    if floating is float:
        dx_np = np.zeros((n, c_in, t_in), dtype=np.float32)
    else:
        dx_np = np.zeros((n, c_in, t_in), dtype=np.float64)
    cdef floating[:, :, ::1] dx = dx_np
    cdef Py_ssize_t i, d, c, o, k, base
    cdef floating gv
    with nogil:
        for i in range(n):
            for d in range(c_out):
                for o in range(t_out):
                    gv = g[i, d, o]
                    base = o * stride
                    for c in range(c_in):
                        for k in range(kernel):
                            dx[i, c, base + k] = dx[i, c, base + k] + gv * w[d, c, k]
    return dx_np


def conv1d_grad_weight(floating[:, :, ::1] g, floating[:, :, ::1] x, int stride, int kernel):
    cdef Py_ssize_t n = g.shape[0], c_out = g.shape[1], t_out = g.shape[2]
    cdef Py_ssize_t c_in = x.shape[1]
    if floating is float:
        dw_np = np.zeros((c_out, c_in, kernel), dtype=np.float32)
    else:
        dw_np = np.zeros((c_out, c_in, kernel), dtype=np.float64)
    cdef floating[:, :, ::1] dw = dw_np
    cdef Py_ssize_t i, d, c, o, k, base
    cdef floating gv
    with nogil:
        for i in range(n):
            for d in range(c_out):
                for o in range(t_out):
                    gv = g[i, d, o]
                    base = o * stride
                    for c in range(c_in):
                        for k in range(kernel):
                            dw[d, c, k] = dw[d, c, k] + gv * x[i, c, base + k]
    return dw_np


def resample_sinc(floating[::1] x, double step, Py_ssize_t n_out, int half_width):
    cdef Py_ssize_t t_in = x.shape[0]
    if floating is float:
        out_np = np.zeros(n_out, dtype=np.float32)
    else:
        out_np = np.zeros(n_out, dtype=np.float64)
    cdef floating[::1] out = out_np
    cdef Py_ssize_t n, j, base
    cdef double pos, frac, s, weight, acc
    with nogil:
        for n in range(n_out):
            pos = n * step
            base = <Py_ssize_t> floor(pos)
            acc = 0.0
            for j in range(base - half_width + 1, base + half_width + 1):
                if j < 0 or j >= t_in:
                    continue
                frac = pos - j
                if fabs(frac) >= half_width:
                    continue
                if frac == 0.0:
                    s = 1.0
                else:
                    s = sin(M_PI * frac) / (M_PI * frac)
                weight = s * 0.5 * (1.0 + cos(M_PI * frac / half_width))
                acc = acc + weight * <double> x[j]
            out[n] = <floating> acc
    return out_np
