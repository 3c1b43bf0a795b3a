# cython: boundscheck=False, wraparound=False, cdivision=True
"""Hot 3D convolution kernels (forward + parameter gradients).

The Python-side wrapper pads inputs and dispatches here; a pure-NumPy
fallback with identical semantics lives in segqa.kernels.
"""

import numpy as np

ctypedef fused real:
    float
    double


def conv3d_forward_padded(real[:, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                          real[::1] bias, real[:, :, :, ::1] out):
    """out[co] = bias[co] + sum_ci w[co,ci] (cross-)correlated with padded xp."""
    cdef Py_ssize_t co_n = out.shape[0], x_n = out.shape[1]
    cdef Py_ssize_t y_n = out.shape[2], z_n = out.shape[3]
    cdef Py_ssize_t ci_n = xp.shape[0], k = w.shape[2]
    cdef Py_ssize_t co, ci, dx, dy, dz, x, y, z
    cdef real wv

    for co in range(co_n):
        for x in range(x_n):
            for y in range(y_n):
                for z in range(z_n):
                    out[co, x, y, z] = bias[co]
    for co in range(co_n):
        for ci in range(ci_n):
            for dx in range(k):
                for dy in range(k):
                    for dz in range(k):
                        wv = w[co, ci, dx, dy, dz]
                        if wv == 0:
                            continue
                        for x in range(x_n):
                            for y in range(y_n):
                                for z in range(z_n):
                                    out[co, x, y, z] = out[co, x, y, z] + wv * xp[ci, x + dx, y + dy, z + dz]


def conv3d_grad_weights_padded(real[:, :, :, ::1] xp, real[:, :, :, ::1] gout,
                               real[:, :, :, :, ::1] gw):
    """gw[co,ci,d] = sum_p gout[co,p] * xp[ci,p+d]."""
    cdef Py_ssize_t co_n = gout.shape[0], x_n = gout.shape[1]
    cdef Py_ssize_t y_n = gout.shape[2], z_n = gout.shape[3]
    cdef Py_ssize_t ci_n = xp.shape[0], k = gw.shape[2]
    cdef Py_ssize_t co, ci, dx, dy, dz, x, y, z
    cdef double acc

    for co in range(co_n):
        for ci in range(ci_n):
            for dx in range(k):
                for dy in range(k):
                    for dz in range(k):
                        acc = 0.0
                        for x in range(x_n):
                            for y in range(y_n):
                                for z in range(z_n):
                                    acc += gout[co, x, y, z] * xp[ci, x + dx, y + dy, z + dz]
                        gw[co, ci, dx, dy, dz] = <real> acc
