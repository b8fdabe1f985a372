# Compiled 2x2 block-grid kernels. Semantics must match _kernels_py exactly;
# tests/test_backend_equivalence.py holds the two implementations together.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND_NAME = "cython"


def kron_upsample2(double[:, ::1] g):
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((2 * h, 2 * w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k
    cdef double v
    for j in range(h):
        for k in range(w):
            v = g[j, k]
            o[2 * j, 2 * k] = v
            o[2 * j, 2 * k + 1] = v
            o[2 * j + 1, 2 * k] = v
            o[2 * j + 1, 2 * k + 1] = v
    return out


def block_sum2(double[:, ::1] g):
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((h // 2, w // 2))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k
    for j in range(h // 2):
        for k in range(w // 2):
            o[j, k] = (g[2 * j, 2 * k] + g[2 * j, 2 * k + 1]
                       + g[2 * j + 1, 2 * k] + g[2 * j + 1, 2 * k + 1])
    return out


def spatial_softmax2(double[:, ::1] z):
    cdef Py_ssize_t h = z.shape[0], w = z.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((h, w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k
    cdef double a, b, c, d, m, ea, eb, ec, ed, s
    for j in range(h // 2):
        for k in range(w // 2):
            a = z[2 * j, 2 * k]
            b = z[2 * j, 2 * k + 1]
            c = z[2 * j + 1, 2 * k]
            d = z[2 * j + 1, 2 * k + 1]
            m = a
            if b > m: m = b
            if c > m: m = c
            if d > m: m = d
            ea = exp(a - m)
            eb = exp(b - m)
            ec = exp(c - m)
            ed = exp(d - m)
            s = ea + eb + ec + ed
            o[2 * j, 2 * k] = ea / s
            o[2 * j, 2 * k + 1] = eb / s
            o[2 * j + 1, 2 * k] = ec / s
            o[2 * j + 1, 2 * k + 1] = ed / s
    return out


def spatial_softmax2_backward(double[:, ::1] u, double[:, ::1] du):
    cdef Py_ssize_t h = u.shape[0], w = u.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((h, w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k
    cdef double dot
    for j in range(h // 2):
        for k in range(w // 2):
            dot = (u[2 * j, 2 * k] * du[2 * j, 2 * k]
                   + u[2 * j, 2 * k + 1] * du[2 * j, 2 * k + 1]
                   + u[2 * j + 1, 2 * k] * du[2 * j + 1, 2 * k]
                   + u[2 * j + 1, 2 * k + 1] * du[2 * j + 1, 2 * k + 1])
            o[2 * j, 2 * k] = u[2 * j, 2 * k] * (du[2 * j, 2 * k] - dot)
            o[2 * j, 2 * k + 1] = u[2 * j, 2 * k + 1] * (du[2 * j, 2 * k + 1] - dot)
            o[2 * j + 1, 2 * k] = u[2 * j + 1, 2 * k] * (du[2 * j + 1, 2 * k] - dot)
            o[2 * j + 1, 2 * k + 1] = u[2 * j + 1, 2 * k + 1] * (du[2 * j + 1, 2 * k + 1] - dot)
    return out


def guided_upsample(double[:, ::1] prev, double[:, ::1] u):
    cdef Py_ssize_t h = prev.shape[0], w = prev.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((2 * h, 2 * w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k
    cdef double v
    for j in range(h):
        for k in range(w):
            v = prev[j, k]
            o[2 * j, 2 * k] = v * u[2 * j, 2 * k]
            o[2 * j, 2 * k + 1] = v * u[2 * j, 2 * k + 1]
            o[2 * j + 1, 2 * k] = v * u[2 * j + 1, 2 * k]
            o[2 * j + 1, 2 * k + 1] = v * u[2 * j + 1, 2 * k + 1]
    return out


def merge_step(double[:, ::1] prev, double[:, ::1] c,
               double[:, ::1] w, double[:, ::1] u):
    cdef Py_ssize_t ph = prev.shape[0], pw = prev.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((2 * ph, 2 * pw))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k, r, s
    cdef double v
    for j in range(ph):
        for k in range(pw):
            v = prev[j, k]
            for r in range(2 * j, 2 * j + 2):
                for s in range(2 * k, 2 * k + 2):
                    o[r, s] = (1.0 - w[r, s]) * v * u[r, s] + w[r, s] * c[r, s]
    return out


def gt_upsample_map(double[:, ::1] prev, double[:, ::1] cur):
    cdef Py_ssize_t h = prev.shape[0], w = prev.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((2 * h, 2 * w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t j, k, r, s
    cdef double den
    for j in range(h):
        for k in range(w):
            den = prev[j, k]
            for r in range(2 * j, 2 * j + 2):
                for s in range(2 * k, 2 * k + 2):
                    o[r, s] = 0.25 if den == 0.0 else cur[r, s] / den
    return out


def block_max2(double[:, ::1] g):
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    cdef cnp.ndarray[double, ndim=2] mx = np.empty((h // 2, w // 2))
    cdef cnp.ndarray[cnp.int64_t, ndim=2] arg = np.empty((h // 2, w // 2), dtype=np.int64)
    cdef double[:, ::1] m = mx
    cdef cnp.int64_t[:, ::1] a = arg
    cdef Py_ssize_t j, k
    cdef double best, v
    cdef cnp.int64_t off
    for j in range(h // 2):
        for k in range(w // 2):
            best = g[2 * j, 2 * k]
            off = 0
            v = g[2 * j, 2 * k + 1]
            if v > best:
                best = v
                off = 1
            v = g[2 * j + 1, 2 * k]
            if v > best:
                best = v
                off = 2
            v = g[2 * j + 1, 2 * k + 1]
            if v > best:
                best = v
                off = 3
            m[j, k] = best
            a[j, k] = off
    return mx, arg
