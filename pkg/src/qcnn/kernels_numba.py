"""Numba-compiled hot kernels.

Default backend. Every kernel parallelizes only over axes whose outputs are
disjoint (batch rows, output filters), and each output element is reduced in
a fixed sequential order, so results are bit-identical regardless of thread
count.
"""

import numpy as np
from numba import njit, prange

NAME = "numba"

_F32 = np.float32


@njit(cache=True, parallel=True, fastmath=True)
def conv2d_forward(xp, w, stride):
    n, c, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    y = np.zeros((n, f, oh, ow), dtype=_F32)
    # inner loop runs along the contiguous output row so it vectorizes
    for i in prange(n):
        for j in range(f):
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[j, ch, ky, kx]
                        for oy in range(oh):
                            xrow = xp[i, ch, oy * stride + ky]
                            yrow = y[i, j, oy]
                            for ox in range(ow):
                                yrow[ox] += wv * xrow[ox * stride + kx]
    return y


@njit(cache=True, parallel=True, fastmath=True)
def conv2d_backward_input(dy, w, stride, hp, wp):
    n, f, oh, ow = dy.shape
    _, c, kh, kw = w.shape
    dxp = np.zeros((n, c, hp, wp), dtype=_F32)
    for i in prange(n):
        for j in range(f):
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[j, ch, ky, kx]
                        for oy in range(oh):
                            dyrow = dy[i, j, oy]
                            dxrow = dxp[i, ch, oy * stride + ky]
                            for ox in range(ow):
                                dxrow[ox * stride + kx] += wv * dyrow[ox]
    return dxp


@njit(cache=True, parallel=True, fastmath=True)
def conv2d_backward_weight(dy, xp, kh, kw, stride):
    n, f, oh, ow = dy.shape
    c = xp.shape[1]
    dw = np.zeros((f, c, kh, kw), dtype=_F32)
    for j in prange(f):
        for i in range(n):
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        acc = _F32(0.0)
                        for oy in range(oh):
                            dyrow = dy[i, j, oy]
                            xrow = xp[i, ch, oy * stride + ky]
                            for ox in range(ow):
                                acc += dyrow[ox] * xrow[ox * stride + kx]
                        dw[j, ch, ky, kx] += acc
    return dw


@njit(cache=True, parallel=True)
def maxpool2d_forward(x, k, stride):
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    y = np.empty((n, c, oh, ow), dtype=_F32)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for i in prange(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    iy0 = oy * stride
                    ix0 = ox * stride
                    best = x[i, ch, iy0, ix0]
                    bidx = iy0 * w + ix0
                    for ky in range(k):
                        for kx in range(k):
                            v = x[i, ch, iy0 + ky, ix0 + kx]
                            if v > best:
                                best = v
                                bidx = (iy0 + ky) * w + ix0 + kx
                    y[i, ch, oy, ox] = best
                    arg[i, ch, oy, ox] = bidx
    return y, arg


@njit(cache=True, parallel=True)
def maxpool2d_backward(dy, arg, h, w):
    n, c, oh, ow = dy.shape
    dx = np.zeros((n, c, h * w), dtype=_F32)
    for i in prange(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    dx[i, ch, arg[i, ch, oy, ox]] += dy[i, ch, oy, ox]
    return dx.reshape(n, c, h, w)


@njit(cache=True, parallel=True, fastmath=True)
def avgpool2d_forward(x, k, stride):
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    inv = _F32(1.0 / (k * k))
    y = np.empty((n, c, oh, ow), dtype=_F32)
    for i in prange(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    acc = _F32(0.0)
                    for ky in range(k):
                        for kx in range(k):
                            acc += x[i, ch, oy * stride + ky, ox * stride + kx]
                    y[i, ch, oy, ox] = acc * inv
    return y


@njit(cache=True, parallel=True, fastmath=True)
def avgpool2d_backward(dy, k, stride, h, w):
    n, c, oh, ow = dy.shape
    inv = _F32(1.0 / (k * k))
    dx = np.zeros((n, c, h, w), dtype=_F32)
    for i in prange(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    g = dy[i, ch, oy, ox] * inv
                    for ky in range(k):
                        for kx in range(k):
                            dx[i, ch, oy * stride + ky, ox * stride + kx] += g
    return dx


@njit(cache=True)
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit(cache=True, parallel=True)
def xnor_dot_rows(a, mask, b, nvalid):
    p, wd = a.shape
    f = b.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    for i in prange(p):
        for j in range(f):
            acc = np.uint64(0)
            for t in range(wd):
                acc += _popcount64((a[i, t] ^ b[j, t]) & mask[i, t])
            out[i, j] = nvalid[i] - np.int64(2) * np.int64(acc)
    return out


@njit(cache=True, parallel=True)
def xnor_dot_rows_dense(a, b, nbits):
    """All bits live: tail words are zero on both sides, so the XOR of the
    tails contributes no set bits and no mask is needed."""
    p, wd = a.shape
    f = b.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    for i in prange(p):
        for j in range(f):
            acc = np.uint64(0)
            for t in range(wd):
                acc += _popcount64(a[i, t] ^ b[j, t])
            out[i, j] = nbits - np.int64(2) * np.int64(acc)
    return out
