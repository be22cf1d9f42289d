"""Pure-numpy implementations of the hot kernels.

Fallback path for machines without a working numba install, selected with
QCNN_BACKEND=numpy. Convolutions go through sliding-window views and BLAS
matmuls; reductions keep a fixed order so results are reproducible run to
run for a given build.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def conv2d_forward(xp, w, stride):
    """Cross-correlate padded input [N,C,Hp,Wp] with filters [F,C,kH,kW]."""
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("ncijkl,fckl->nfij", win, w, optimize=True)
    return np.ascontiguousarray(y, dtype=np.float32)


def conv2d_backward_input(dy, w, stride, hp, wp):
    """Gradient w.r.t. the padded input."""
    n, f, oh, ow = dy.shape
    _, c, kh, kw = w.shape
    dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
    # [N,OH,OW,C,kH,kW]; one strided scatter-add per kernel offset.
    t = np.tensordot(dy, w, axes=([1], [0]))
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += (
                t[..., ky, kx].transpose(0, 3, 1, 2)
            )
    return dxp


def conv2d_backward_weight(dy, xp, kh, kw, stride):
    """Gradient w.r.t. the filters, accumulated over the batch."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("nfij,ncijkl->fckl", dy, win, optimize=True)
    return np.ascontiguousarray(dw, dtype=np.float32)


def maxpool2d_forward(x, k, stride):
    """Window-wise max; also returns the flat spatial argmax per window.

    Ties resolve to the lowest flat index because window-local raster order
    matches global raster order.
    """
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, k * k)
    local = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[:, None] * stride
    ox = np.arange(ow)[None, :] * stride
    gy = oy[None, None] + local // k
    gx = ox[None, None] + local % k
    arg = (gy * w + gx).astype(np.int64)
    return np.ascontiguousarray(y, dtype=np.float32), arg


def maxpool2d_backward(dy, arg, h, w):
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=np.float32)
    rows = dx.reshape(n * c, h * w)
    idx = arg.reshape(n * c, -1)
    vals = dy.reshape(n * c, -1)
    for r in range(rows.shape[0]):
        np.add.at(rows[r], idx[r], vals[r])
    return dx.reshape(n, c, h, w)


def avgpool2d_forward(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    y = win.mean(axis=(-2, -1), dtype=np.float32)
    return np.ascontiguousarray(y, dtype=np.float32)


def avgpool2d_backward(dy, k, stride, h, w):
    n, c, oh, ow = dy.shape
    dx = np.zeros((n, c, h, w), dtype=np.float32)
    g = dy * np.float32(1.0 / (k * k))
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += g
    return dx


_CHUNK = 4096


def xnor_dot_rows(a, mask, b, nvalid):
    """All-pairs masked XNOR dot: out[p,f] = nvalid[p] - 2*popcount((a[p]^b[f]) & mask[p])."""
    p = a.shape[0]
    f = b.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    for lo in range(0, p, _CHUNK):
        hi = min(lo + _CHUNK, p)
        x = (a[lo:hi, None, :] ^ b[None, :, :]) & mask[lo:hi, None, :]
        cnt = np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
        out[lo:hi] = nvalid[lo:hi, None] - 2 * cnt
    return out


def xnor_dot_rows_dense(a, b, nbits):
    """Unmasked variant for fully live rows (zeroed tails cancel in the XOR)."""
    p = a.shape[0]
    f = b.shape[0]
    out = np.empty((p, f), dtype=np.int32)
    for lo in range(0, p, _CHUNK):
        hi = min(lo + _CHUNK, p)
        cnt = np.bitwise_count(a[lo:hi, None, :] ^ b[None, :, :]).sum(axis=-1, dtype=np.int64)
        out[lo:hi] = nbits - 2 * cnt
    return out
