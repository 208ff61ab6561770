"""Numpy fallback for the hot kernels.

Same call surface as the compiled module (_ckernels). matmul maps onto
BLAS; conv2d goes through an explicit patch-gather (im2col) and
tensordot. Results are bitwise reproducible run to run, but the
reduction order is the library's, so the last bits can differ from the
compiled core (see the kernel benchmark for measured deltas).
"""

import numpy as np

BACKEND = "python"


def matmul(a, b):
    return a @ b


def matmul_grad_a(gout, b):
    return gout @ b.T


def matmul_grad_b(a, gout):
    return a.T @ gout


def bmm(a, b):
    return np.matmul(a, b)


def bmm_grad_a(gout, b):
    return np.matmul(gout, b.transpose(0, 2, 1))


def bmm_grad_b(a, gout):
    return np.matmul(a.transpose(0, 2, 1), gout)


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _gather_patches(xp, kh, kw, stride, ho, wo):
    n, ci = xp.shape[0], xp.shape[1]
    cols = np.empty((n, ci, kh, kw, ho, wo), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return cols


def conv2d_forward(x, k, stride, padding):
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _gather_patches(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(k, cols, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_grad_input(gout, k, x_shape, stride, padding):
    n, ci, h, w = x_shape
    co, _, kh, kw = k.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gxp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            # (n, ho, wo, ci) contribution of kernel tap (u, v)
            contrib = np.tensordot(gout, k[:, :, u, v], axes=([1], [0]))
            gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    if padding:
        gxp = gxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gxp)


def conv2d_grad_kernel(gout, x, k_shape, stride, padding):
    co, ci, kh, kw = k_shape
    ho, wo = gout.shape[2], gout.shape[3]
    cols = _gather_patches(_pad(x, padding), kh, kw, stride, ho, wo)
    gk = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 4, 5]))
    return np.ascontiguousarray(gk)
