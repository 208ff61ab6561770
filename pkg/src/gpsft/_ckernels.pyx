# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels with a pinned reduction order.

Every accumulation runs left to right over ascending indices, so
outputs are bitwise identical across runs and machines with IEEE-754
doubles. The numpy fallback (_kernels_np) matches these results only
to rounding, which is why backends are never mixed inside one run.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def matmul(cnp.ndarray[double, ndim=2, mode="c"] a not None,
           cnp.ndarray[double, ndim=2, mode="c"] b not None):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], p = b.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.zeros((m, p), dtype=np.float64)
    cdef const double[:, ::1] av = a, bv = b
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(m):
        for k in range(n):
            aik = av[i, k]
            for j in range(p):
                ov[i, j] += aik * bv[k, j]
    return out


def matmul_grad_a(cnp.ndarray[double, ndim=2, mode="c"] gout not None,
                  cnp.ndarray[double, ndim=2, mode="c"] b not None):
    # grad_a[i, k] = sum_j gout[i, j] * b[k, j], ascending j
    cdef Py_ssize_t m = gout.shape[0], p = gout.shape[1], n = b.shape[0]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.zeros((m, n), dtype=np.float64)
    cdef const double[:, ::1] gv = gout, bv = b
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, k, j
    cdef double acc
    for i in range(m):
        for k in range(n):
            acc = 0.0
            for j in range(p):
                acc += gv[i, j] * bv[k, j]
            ov[i, k] = acc
    return out


def matmul_grad_b(cnp.ndarray[double, ndim=2, mode="c"] a not None,
                  cnp.ndarray[double, ndim=2, mode="c"] gout not None):
    # grad_b[k, j] = sum_i a[i, k] * gout[i, j], ascending i
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], p = gout.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.zeros((n, p), dtype=np.float64)
    cdef const double[:, ::1] av = a, gv = gout
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(m):
        for k in range(n):
            aik = av[i, k]
            for j in range(p):
                ov[k, j] += aik * gv[i, j]
    return out


def bmm(cnp.ndarray[double, ndim=3, mode="c"] a not None,
        cnp.ndarray[double, ndim=3, mode="c"] b not None):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], n = a.shape[2], p = b.shape[2]
    cdef cnp.ndarray[double, ndim=3, mode="c"] out = np.zeros((nb, m, p), dtype=np.float64)
    cdef const double[:, :, ::1] av = a, bv = b
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t t, i, k, j
    cdef double aik
    for t in range(nb):
        for i in range(m):
            for k in range(n):
                aik = av[t, i, k]
                for j in range(p):
                    ov[t, i, j] += aik * bv[t, k, j]
    return out


def bmm_grad_a(cnp.ndarray[double, ndim=3, mode="c"] gout not None,
               cnp.ndarray[double, ndim=3, mode="c"] b not None):
    cdef Py_ssize_t nb = gout.shape[0], m = gout.shape[1], p = gout.shape[2], n = b.shape[1]
    cdef cnp.ndarray[double, ndim=3, mode="c"] out = np.zeros((nb, m, n), dtype=np.float64)
    cdef const double[:, :, ::1] gv = gout, bv = b
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t t, i, k, j
    cdef double acc
    for t in range(nb):
        for i in range(m):
            for k in range(n):
                acc = 0.0
                for j in range(p):
                    acc += gv[t, i, j] * bv[t, k, j]
                ov[t, i, k] = acc
    return out


def bmm_grad_b(cnp.ndarray[double, ndim=3, mode="c"] a not None,
               cnp.ndarray[double, ndim=3, mode="c"] gout not None):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], n = a.shape[2], p = gout.shape[2]
    cdef cnp.ndarray[double, ndim=3, mode="c"] out = np.zeros((nb, n, p), dtype=np.float64)
    cdef const double[:, :, ::1] av = a, gv = gout
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t t, i, k, j
    cdef double aik
    for t in range(nb):
        for i in range(m):
            for k in range(n):
                aik = av[t, i, k]
                for j in range(p):
                    ov[t, k, j] += aik * gv[t, i, j]
    return out


def conv2d_forward(cnp.ndarray[double, ndim=4, mode="c"] x not None,
                   cnp.ndarray[double, ndim=4, mode="c"] k not None,
                   int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    cdef cnp.ndarray[double, ndim=4, mode="c"] out = np.zeros((n, co, ho, wo), dtype=np.float64)
    cdef const double[:, :, :, ::1] xv = x, kv = k
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, c, oh, ow, ic, u, v, ih, iw
    cdef double acc
    for b in range(n):
        for c in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ic in range(ci):
                        for u in range(kh):
                            ih = oh * stride + u - padding
                            if ih < 0 or ih >= h:
                                continue
                            for v in range(kw):
                                iw = ow * stride + v - padding
                                if iw < 0 or iw >= w:
                                    continue
                                acc += xv[b, ic, ih, iw] * kv[c, ic, u, v]
                    ov[b, c, oh, ow] = acc
    return out


def conv2d_grad_input(cnp.ndarray[double, ndim=4, mode="c"] gout not None,
                      cnp.ndarray[double, ndim=4, mode="c"] k not None,
                      tuple x_shape, int stride, int padding):
    cdef Py_ssize_t n = x_shape[0], ci = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t co = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef cnp.ndarray[double, ndim=4, mode="c"] gx = np.zeros((n, ci, h, w), dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = gout, kv = k
    cdef double[:, :, :, ::1] xv = gx
    cdef Py_ssize_t b, c, oh, ow, ic, u, v, ih, iw
    cdef double g
    for b in range(n):
        for c in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = gv[b, c, oh, ow]
                    for ic in range(ci):
                        for u in range(kh):
                            ih = oh * stride + u - padding
                            if ih < 0 or ih >= h:
                                continue
                            for v in range(kw):
                                iw = ow * stride + v - padding
                                if iw < 0 or iw >= w:
                                    continue
                                xv[b, ic, ih, iw] += g * kv[c, ic, u, v]
    return gx


def conv2d_grad_kernel(cnp.ndarray[double, ndim=4, mode="c"] gout not None,
                       cnp.ndarray[double, ndim=4, mode="c"] x not None,
                       tuple k_shape, int stride, int padding):
    cdef Py_ssize_t co = k_shape[0], ci = k_shape[1], kh = k_shape[2], kw = k_shape[3]
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef cnp.ndarray[double, ndim=4, mode="c"] gk = np.zeros((co, ci, kh, kw), dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = gout, xv = x
    cdef double[:, :, :, ::1] kv = gk
    cdef Py_ssize_t b, c, oh, ow, ic, u, v, ih, iw
    cdef double g
    for b in range(n):
        for c in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = gv[b, c, oh, ow]
                    for ic in range(ci):
                        for u in range(kh):
                            ih = oh * stride + u - padding
                            if ih < 0 or ih >= h:
                                continue
                            for v in range(kw):
                                iw = ow * stride + v - padding
                                if iw < 0 or iw >= w:
                                    continue
                                kv[c, ic, u, v] += g * xv[b, ic, ih, iw]
    return gk
