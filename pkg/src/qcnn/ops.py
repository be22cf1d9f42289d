"""Differentiable operations over Tensor.

Each op validates shapes, runs the forward kernel, and registers a closure
computing input gradients from the upstream gradient. Heavy kernels
(convolution, pooling) dispatch through the selected backend.
"""

import numpy as np

from .backend import kernels
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, record

_F32 = np.float32


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / reduction
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a, s):
    a = _as_tensor(a)
    s = _F32(s)
    return record("scale", (a,), a.data * s, lambda g: (g * s,))


def tsum(a):
    a = _as_tensor(a)
    out = np.array([a.data.sum(dtype=np.float64)], dtype=_F32)
    return record("sum", (a,), out, lambda g: (np.full_like(a.data, g.reshape(-1)[0]),))


def tmean(a):
    a = _as_tensor(a)
    inv = _F32(1.0 / a.size)
    out = np.array([a.data.mean(dtype=np.float64)], dtype=_F32)
    return record("mean", (a,), out, lambda g: (np.full_like(a.data, g.reshape(-1)[0] * inv),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# non-linearities
# ---------------------------------------------------------------------------


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, _F32(0.0)), lambda g: (g * mask,))


def hardtanh(a):
    a = _as_tensor(a)
    mask = (a.data >= -1.0) & (a.data <= 1.0)
    return record("hardtanh", (a,), np.clip(a.data, -1.0, 1.0), lambda g: (g * mask,))


def nonlinearity(a, kind):
    if kind == "relu":
        return relu(a)
    if kind == "hardtanh":
        return hardtanh(a)
    raise ConfigurationError(f"unknown non-linearity {kind!r}")


# ---------------------------------------------------------------------------
# affine layers
# ---------------------------------------------------------------------------


def linear(x, w, b=None):
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear: input axis 1 ({x.shape[1]}) != weight axis 1 ({w.shape[1]})"
        )
    y = x.data @ w.data.T
    inputs = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data
        inputs = (x, w, b)

    def back(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record("linear", inputs, y.astype(_F32, copy=False), back)


def conv2d(x, w, b=None, stride=1, padding=0):
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wdt = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise DimensionError(f"conv2d: kernel channel axis 1 ({ck}) != input channel axis 1 ({c})")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"conv2d: padding must be non-negative, got {padding}")
    # floor-division window arithmetic; trailing rows/columns that do not
    # fit a full window are dropped (needed by stride-2 3x3 transitions)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ConfigurationError(
            f"conv2d: non-positive output size for input {h}x{wdt}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wdt + 2 * padding), dtype=_F32)
        xp[:, :, padding : padding + h, padding : padding + wdt] = x.data
    else:
        xp = x.data
    y = kernels.conv2d_forward(xp, w.data, stride)
    inputs = (x, w)
    if b is not None:
        if b.shape != (f,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({f},)")
        y = y + b.data.reshape(1, f, 1, 1)
        inputs = (x, w, b)

    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        g = np.ascontiguousarray(g, dtype=_F32)
        dxp = kernels.conv2d_backward_input(g, w.data, stride, hp, wp)
        dx = dxp[:, :, padding : padding + h, padding : padding + wdt] if padding else dxp
        dw = kernels.conv2d_backward_weight(g, xp, kh, kw, stride)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, y, back)


def channel_affine(x, alpha, bias=None):
    """Per-output-channel scale (a constant array) plus optional bias tensor.

    Used by the 1-bit weight paths: the convolution runs on the raw sign
    weights and the scale applies afterwards, which keeps the accumulation
    exactly integer-valued and lets the bit-packed path reproduce it.
    """
    x = _as_tensor(x)
    c = x.shape[1]
    alpha = np.asarray(alpha, dtype=_F32)
    if alpha.shape != (c,):
        raise DimensionError(f"channel_affine: alpha shape {alpha.shape} != ({c},)")
    shape = (1, c) + (1,) * (x.ndim - 2)
    a = alpha.reshape(shape)
    y = x.data * a
    inputs = (x,)
    if bias is not None:
        if bias.shape != (c,):
            raise DimensionError(f"channel_affine: bias shape {bias.shape} != ({c},)")
        y = y + bias.data.reshape(shape)
        inputs = (x, bias)

    axes = tuple(i for i in range(x.ndim) if i != 1)

    def back(g):
        if bias is None:
            return (g * a,)
        return g * a, g.sum(axis=axes)

    return record("channel_affine", inputs, y, back)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool2d(x, kind, k, stride):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ConfigurationError(f"pool2d: window {k} larger than input {h}x{w}")
    if (h - k) % stride or (w - k) % stride:
        raise ConfigurationError(
            f"pool2d: input {h}x{w} not divisible for window {k}, stride {stride}"
        )
    if kind == "max":
        y, arg = kernels.maxpool2d_forward(x.data, k, stride)

        def back(g):
            return (kernels.maxpool2d_backward(np.ascontiguousarray(g, dtype=_F32), arg, h, w),)

        return record("maxpool2d", (x,), y, back)
    if kind == "avg":
        y = kernels.avgpool2d_forward(x.data, k, stride)

        def back(g):
            return (
                kernels.avgpool2d_backward(np.ascontiguousarray(g, dtype=_F32), k, stride, h, w),
            )

        return record("avgpool2d", (x,), y, back)
    raise ConfigurationError(f"pool2d: unknown kind {kind!r}")


def spatial_mean(x):
    """Global average pool: [N,C,H,W] -> [N,C]."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    inv = _F32(1.0 / (h * w))
    y = x.data.mean(axis=(2, 3), dtype=np.float64).astype(_F32)

    def back(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).astype(_F32),)

    return record("spatial_mean", (x,), y, back)


# ---------------------------------------------------------------------------
# batch normalization (fused)
# ---------------------------------------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, eps, momentum, training):
    """Channel-wise normalization over axis 1 for 2-D or 4-D inputs.

    Training mode normalizes with the batch statistics and updates the
    running arrays in place (exponential moving average); eval mode uses
    the running statistics.
    """
    x = _as_tensor(x)
    if x.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        shape = (1, -1)
    else:
        raise DimensionError(f"batchnorm: expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta shape must be ({c},)")
    m = x.size // c

    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(_F32)
    mean = mean.astype(_F32)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        gs = (gamma.data * inv_std).reshape(shape)
        if training:
            dx = gs * (g - (dbeta.reshape(shape) + xhat * dgamma.reshape(shape)) / _F32(m))
        else:
            dx = gs * g
        return dx.astype(_F32, copy=False), dgamma, dbeta

    return record("batchnorm", (x, gamma, beta), y.astype(_F32, copy=False), back)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of logits [N,K] against integer labels [N]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross-entropy: expected 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross-entropy: labels shape {labels.shape} != ({n},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = np.array([-logp[np.arange(n), labels].mean(dtype=np.float64)], dtype=_F32)
    probs = ez / denom

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g.reshape(-1)[0] / _F32(n)),)

    return record("cross_entropy", (logits,), loss, back)


# ---------------------------------------------------------------------------
# quantization hooks
# ---------------------------------------------------------------------------


def ste_identity(x, forward_fn, clip_lo, clip_hi):
    """Apply an elementwise quantization map with a straight-through gradient.

    Forward emits forward_fn(x); backward passes the upstream gradient
    unchanged where clip_lo <= x <= clip_hi and zero elsewhere.
    """
    if not clip_lo < clip_hi:
        raise ContractError(f"ste_identity: clip_lo {clip_lo} must be < clip_hi {clip_hi}")
    x = _as_tensor(x)
    y = np.ascontiguousarray(forward_fn(x.data), dtype=_F32)
    if y.shape != x.shape:
        raise ContractError("ste_identity: forward_fn must preserve shape")
    mask = (x.data >= clip_lo) & (x.data <= clip_hi)
    return record("ste", (x,), y, lambda g: (g * mask,))


def ttq_quantize(w, pos_scale, neg_scale, threshold_frac):
    """Ternarize with two learned per-layer scales.

    delta = threshold_frac * max|w|; output is pos_scale above delta,
    -neg_scale below -delta, zero between. Gradients: the scales collect
    the upstream sums of their regions (negated for the negative scale);
    the weights receive the upstream scaled by the region's factor, with
    unit pass-through in the dead zone.
    """
    delta = float(threshold_frac) * float(np.max(np.abs(w.data))) if w.size else 0.0
    pos_mask = w.data > delta
    neg_mask = w.data < -delta
    p = _F32(pos_scale.data.reshape(-1)[0])
    q = _F32(neg_scale.data.reshape(-1)[0])
    y = np.zeros_like(w.data)
    y[pos_mask] = p
    y[neg_mask] = -q

    def back(g):
        d_pos = np.array([g[pos_mask].sum(dtype=np.float64)], dtype=_F32)
        d_neg = np.array([-g[neg_mask].sum(dtype=np.float64)], dtype=_F32)
        dw = g.copy()
        dw[pos_mask] *= p
        dw[neg_mask] *= q
        return dw, d_pos, d_neg

    return record("ttq", (w, pos_scale, neg_scale), y, back)
