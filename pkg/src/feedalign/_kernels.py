"""Compiled loop nests behind :mod:`feedalign.tensor`.

Every kernel accumulates each output element in one fixed order and each
output element is owned by exactly one ``prange`` iteration, so results are
bit-identical for any thread count. Nothing here uses BLAS.
"""

import os
import warnings

if "FEEDALIGN_THREADS" in os.environ and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(1, int(os.environ["FEEDALIGN_THREADS"])))
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    import numba
    from numba import njit, prange


def set_threads(n):
    """Cap the worker threads used by the parallel kernels."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


if "FEEDALIGN_THREADS" in os.environ:
    set_threads(os.environ["FEEDALIGN_THREADS"])


@njit(parallel=True, cache=True)
def matmul_into(a, b, out):
    # out[i, j] = sum over t in ascending order, starting from out == 0
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        for t in range(k):
            av = a[i, t]
            for j in range(n):
                out[i, j] += av * b[t, j]


@njit(parallel=True, cache=True)
def sign_matmul_into(e, packed, rows, cols, out):
    # out[b, i] = sum_t s[i, t] * e[b, t] with s in {+1, -1} stored one bit per
    # entry (row-major, LSB first); add/subtract only, t ascending.
    nb = e.shape[0]
    for b in prange(nb):
        for i in range(rows):
            acc = out[b, i]
            base = i * cols
            for t in range(cols):
                pos = base + t
                if (packed[pos >> 3] >> (pos & 7)) & 1:
                    acc = acc + e[b, t]
                else:
                    acc = acc - e[b, t]
            out[b, i] = acc


@njit(parallel=True, cache=True)
def conv_forward_into(xp, k, stride, out):
    # Per output element the sum runs over c, then ky, then kx (kx innermost).
    n_img, n_in, _, _ = xp.shape
    n_out, _, kh, kw = k.shape
    ho = out.shape[2]
    wo = out.shape[3]
    for n in prange(n_img):
        for o in range(n_out):
            for c in range(n_in):
                for ky in range(kh):
                    for kx in range(kw):
                        w = k[o, c, ky, kx]
                        for y in range(ho):
                            row = y * stride + ky
                            for x in range(wo):
                                out[n, o, y, x] += w * xp[n, c, row, x * stride + kx]


@njit(parallel=True, cache=True)
def conv_kernel_grad_into(xp, e, stride, out):
    # out[o, c, ky, kx] = sum over n, y, x (x innermost) of e * shifted input
    n_img, n_in, _, _ = xp.shape
    n_out, _, kh, kw = out.shape
    ho = e.shape[2]
    wo = e.shape[3]
    for o in prange(n_out):
        for c in range(n_in):
            for ky in range(kh):
                for kx in range(kw):
                    acc = out[o, c, ky, kx]
                    for n in range(n_img):
                        for y in range(ho):
                            row = y * stride + ky
                            for x in range(wo):
                                acc += e[n, o, y, x] * xp[n, c, row, x * stride + kx]
                    out[o, c, ky, kx] = acc


@njit(parallel=True, cache=True)
def maxpool_forward_into(x, kh, kw, stride, out, arg):
    # Strict ">" while scanning the window row-major keeps the lowest flat
    # index on ties.
    n_img, n_ch, h, w = x.shape
    ho = out.shape[2]
    wo = out.shape[3]
    for n in prange(n_img):
        for c in range(n_ch):
            for y in range(ho):
                for xo in range(wo):
                    y0 = y * stride
                    x0 = xo * stride
                    best = x[n, c, y0, x0]
                    bi = y0 * w + x0
                    for dy in range(kh):
                        for dx in range(kw):
                            v = x[n, c, y0 + dy, x0 + dx]
                            if v > best:
                                best = v
                                bi = (y0 + dy) * w + (x0 + dx)
                    out[n, c, y, xo] = best
                    arg[n, c, y, xo] = bi


@njit(parallel=True, cache=True)
def maxpool_backward_into(e, arg, out):
    n_img, n_ch, ho, wo = e.shape
    w = out.shape[3]
    for n in prange(n_img):
        for c in range(n_ch):
            for y in range(ho):
                for xo in range(wo):
                    bi = arg[n, c, y, xo]
                    out[n, c, bi // w, bi % w] += e[n, c, y, xo]
