"""The five quantization schemes as pure array maps.

All functions take and return float32 numpy arrays. Weight scales are
per-output-channel (axis 0) except the two learned ternary scales, which
are per-layer. Rounding is half-away-from-zero throughout, fixed for
reproducibility.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError

_F32 = np.float32

ALLOWED_BITS = (1, 2, 3, 4, 8, 32)


class QuantMethod(enum.Enum):
    QNN = "qnn"
    DOREFA = "dorefa"
    XNORNET = "xnornet"
    TWN = "twn"
    TTQ = "ttq"

    @classmethod
    def parse(cls, name):
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "qnn": cls.QNN,
            "dorefa": cls.DOREFA,
            "dorefanet": cls.DOREFA,
            "xnor": cls.XNORNET,
            "xnornet": cls.XNORNET,
            "bwn": cls.XNORNET,
            "twn": cls.TWN,
            "ttq": cls.TTQ,
        }
        if key not in aliases:
            raise ConfigurationError(f"unknown quantization method {name!r}")
        return aliases[key]


DISPLAY_NAMES = {
    QuantMethod.QNN: "QNN",
    QuantMethod.DOREFA: "DoReFa-Net",
    QuantMethod.XNORNET: "XNOR-Net",
    QuantMethod.TWN: "TWN",
    QuantMethod.TTQ: "TTQ",
}

# Which (weight_bits, act_bits) pairs each method supports. QNN and DoReFa
# accept the full grid; the others are restricted to their native forms,
# plus the full-precision degenerate for TWN.
_RESTRICTED_PAIRS = {
    QuantMethod.XNORNET: {(1, 32), (1, 1)},
    QuantMethod.TWN: {(2, 32), (32, 32)},
    QuantMethod.TTQ: {(2, 32)},
}

# Default first/last-layer policy: QNN and TWN quantize the first and last
# conv/fc layers, the other methods exempt them.
_QUANTIZES_EDGE_LAYERS = {
    QuantMethod.QNN: True,
    QuantMethod.DOREFA: False,
    QuantMethod.XNORNET: False,
    QuantMethod.TWN: True,
    QuantMethod.TTQ: False,
}

TTQ_THRESHOLD_FRACTION = 0.05
TWN_DELTA_FRACTION = 0.7


def default_layer_policy(method):
    """(quantize_first_layer, quantize_last_layer) defaults for a method."""
    q = _QUANTIZES_EDGE_LAYERS[method]
    return q, q


@dataclass
class QuantConfig:
    """Method plus bit widths and the first/last-layer policy.

    min_v/max_v override the clip range of the linear quantizer; when left
    None the range is the symmetric fixed-point grid [-1, 1 - 2^(1-bits)]
    derived from the bit width in use.
    """

    method: QuantMethod
    weight_bits: int = 32
    act_bits: int = 32
    quantize_first_layer: Optional[bool] = None
    quantize_last_layer: Optional[bool] = None
    min_v: Optional[float] = None
    max_v: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = QuantMethod.parse(self.method)
        first, last = default_layer_policy(self.method)
        if self.quantize_first_layer is None:
            self.quantize_first_layer = first
        if self.quantize_last_layer is None:
            self.quantize_last_layer = last
        self.validate()

    def validate(self):
        if self.weight_bits not in ALLOWED_BITS:
            raise ConfigurationError(
                f"weight_bits must be one of {ALLOWED_BITS}, got {self.weight_bits}"
            )
        if self.act_bits not in ALLOWED_BITS:
            raise ConfigurationError(f"act_bits must be one of {ALLOWED_BITS}, got {self.act_bits}")
        allowed = _RESTRICTED_PAIRS.get(self.method)
        if allowed is not None and (self.weight_bits, self.act_bits) not in allowed:
            name = DISPLAY_NAMES[self.method]
            forms = ", ".join(f"W{w}A{a}" for w, a in sorted(allowed, reverse=True))
            raise ConfigurationError(
                f"{name} supports only {forms}; got W{self.weight_bits}A{self.act_bits}"
            )

    @property
    def is_full_precision(self):
        return self.weight_bits == 32 and self.act_bits == 32

    def to_dict(self):
        return {
            "method": self.method.value,
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "quantize_first_layer": self.quantize_first_layer,
            "quantize_last_layer": self.quantize_last_layer,
            "min_v": self.min_v,
            "max_v": self.max_v,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            method=QuantMethod.parse(d["method"]),
            weight_bits=d["weight_bits"],
            act_bits=d["act_bits"],
            quantize_first_layer=d.get("quantize_first_layer"),
            quantize_last_layer=d.get("quantize_last_layer"),
            min_v=d.get("min_v"),
            max_v=d.get("max_v"),
        )


@dataclass
class TernaryScales:
    """Scale state for the ternary methods.

    alpha/delta are per-output-channel vectors computed from the weights;
    pos_scale/neg_scale are the per-layer learned scalars.
    """

    pos_scale: float = 1.0
    neg_scale: float = 1.0
    alpha: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None


def round_half_away(x):
    """round() with halves away from zero, e.g. 0.5 -> 1, -0.5 -> -1."""
    return np.trunc(x + np.copysign(_F32(0.5), x))


def sign_binarize(r):
    """+1 where r >= 0, -1 otherwise."""
    r = np.asarray(r, dtype=_F32)
    return np.where(r >= 0, _F32(1.0), _F32(-1.0))


def default_clip_range(bitwidth):
    """Symmetric fixed-point range containing zero: [-1, 1 - 2^(1-bits)]."""
    return -1.0, 1.0 - 2.0 ** (1 - bitwidth)


def linear_quantize(x, bitwidth, min_v=None, max_v=None):
    """Round to a 2^(bitwidth-1)-step grid and clip to [min_v, max_v]."""
    if bitwidth < 2 or bitwidth > 31:
        raise ContractError(
            f"linear_quantize needs 2 <= bitwidth <= 31, got {bitwidth}; "
            "1-bit quantization uses sign_binarize"
        )
    lo, hi = default_clip_range(bitwidth)
    if min_v is not None:
        lo = min_v
    if max_v is not None:
        hi = max_v
    if not lo < hi:
        raise ContractError(f"linear_quantize: min_v {lo} must be < max_v {hi}")
    x = np.asarray(x, dtype=_F32)
    step = _F32(2.0 ** (bitwidth - 1))
    return np.clip(round_half_away(x * step) / step, lo, hi).astype(_F32)


def quantize_k(x, bits):
    """Uniform [0,1] quantizer with 2^bits levels."""
    levels = _F32(2.0**bits - 1.0)
    return (round_half_away(np.asarray(x, dtype=_F32) * levels) / levels).astype(_F32)


def _per_channel(fn, w):
    """Apply fn over each output channel (axis 0), returning a [F] vector."""
    flat = w.reshape(w.shape[0], -1)
    return fn(flat)


def per_channel_abs_mean(w):
    """The per-output-channel l1 scale used by the 1-bit weight methods."""
    return _per_channel(lambda m: np.abs(m).mean(axis=1), np.asarray(w, dtype=_F32)).astype(_F32)


def xnor_weight_quantize(w):
    """Sign-binarize with the l1-optimal per-filter scale (mean |w|)."""
    w = np.asarray(w, dtype=_F32)
    if w.size == 0:
        raise ContractError("xnor_weight_quantize: empty weight tensor")
    b = sign_binarize(w)
    alpha = _per_channel(lambda m: np.abs(m).mean(axis=1), w).astype(_F32)
    return b, alpha


def dorefa_weight_quantize(w, bits):
    """1-bit: per-channel mean|w| times sign. Multi-bit: tanh-normalized
    uniform grid over [-1, 1] with 2^bits levels."""
    if bits not in (1, 2, 3, 4, 8):
        raise ConfigurationError(f"dorefa weight bits must be in 1/2/3/4/8, got {bits}")
    w = np.asarray(w, dtype=_F32)
    if bits == 1:
        b, alpha = xnor_weight_quantize(w)
        shape = (-1,) + (1,) * (w.ndim - 1)
        return (b * alpha.reshape(shape)).astype(_F32)
    t = np.tanh(w)
    m = np.abs(t).max()
    if m == 0.0:
        m = _F32(1.0)
    return (2.0 * quantize_k(t / (2.0 * m) + _F32(0.5), bits) - 1.0).astype(_F32)


def dorefa_activation_quantize(a, bits):
    """Clip to [0,1] and quantize to 2^bits uniform levels."""
    if bits not in (1, 2, 3, 4, 8):
        raise ConfigurationError(f"dorefa activation bits must be in 1/2/3/4/8, got {bits}")
    return quantize_k(np.clip(np.asarray(a, dtype=_F32), 0.0, 1.0), bits)


def twn_ternarize(w):
    """Threshold ternarization with per-channel delta and scale.

    delta = 0.7 * mean|w| per output channel; alpha averages |w| over the
    entries beyond the threshold (zero when none survive). The effective
    weight is alpha * wt.
    """
    w = np.asarray(w, dtype=_F32)
    if w.size == 0:
        raise ContractError("twn_ternarize: empty weight tensor")
    flat = np.abs(w.reshape(w.shape[0], -1))
    delta = (TWN_DELTA_FRACTION * flat.mean(axis=1)).astype(_F32)
    shape = (-1,) + (1,) * (w.ndim - 1)
    d = delta.reshape(shape)
    wt = np.zeros_like(w)
    wt[w > d] = 1.0
    wt[w < -d] = -1.0
    live = flat > delta[:, None]
    counts = live.sum(axis=1)
    sums = np.where(live, flat, 0.0).sum(axis=1)
    alpha = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0).astype(_F32)
    return wt, TernaryScales(alpha=alpha, delta=delta)


def twn_effective_weight(w):
    wt, scales = twn_ternarize(w)
    shape = (-1,) + (1,) * (w.ndim - 1)
    return (wt * scales.alpha.reshape(shape)).astype(_F32)


def ttq_ternarize(w, scales, t=TTQ_THRESHOLD_FRACTION):
    """Ternarize against a per-layer threshold t * max|w| using the two
    learned scales."""
    if scales.pos_scale <= 0 or scales.neg_scale <= 0:
        raise ContractError("ttq_ternarize: scales must be initialized positive")
    w = np.asarray(w, dtype=_F32)
    delta = t * float(np.abs(w).max()) if w.size else 0.0
    out = np.zeros_like(w)
    out[w > delta] = _F32(scales.pos_scale)
    out[w < -delta] = _F32(-scales.neg_scale)
    return out


def ttq_scale_gradients(upstream, w, delta, scales):
    """Gradients of the ternary output w.r.t. the two scales and the weights."""
    upstream = np.asarray(upstream, dtype=_F32)
    w = np.asarray(w, dtype=_F32)
    pos = w > delta
    neg = w < -delta
    d_pos = float(upstream[pos].sum(dtype=np.float64))
    d_neg = -float(upstream[neg].sum(dtype=np.float64))
    dw = upstream.copy()
    dw[pos] *= _F32(scales.pos_scale)
    dw[neg] *= _F32(scales.neg_scale)
    return d_pos, d_neg, dw


def weight_forward_fn(config):
    """The effective-weight map for a method/bit-width, as array -> array.

    Returns None when weights stay full precision. TTQ is excluded: its
    learned scales live in the layer and use a dedicated autodiff node.
    """
    method, bits = config.method, config.weight_bits
    if bits == 32:
        return None
    if method is QuantMethod.QNN:
        if bits == 1:
            return sign_binarize
        return lambda w: linear_quantize(w, bits, config.min_v, config.max_v)
    if method is QuantMethod.DOREFA:
        return lambda w: dorefa_weight_quantize(w, bits)
    if method is QuantMethod.XNORNET:

        def fn(w):
            b, alpha = xnor_weight_quantize(w)
            shape = (-1,) + (1,) * (w.ndim - 1)
            return (b * alpha.reshape(shape)).astype(_F32)

        return fn
    if method is QuantMethod.TWN:
        return twn_effective_weight
    raise ConfigurationError(f"no weight forward map for {method}")


def weight_ste_window(config):
    """Straight-through clip window for the shadow weights.

    The 1-bit methods and QNN's linear grid use [-1, 1]; the remaining
    maps are defined on all reals, so the window stays open to keep
    unclipped shadow weights trainable.
    """
    method, bits = config.method, config.weight_bits
    if bits == 1 or method is QuantMethod.QNN:
        return -1.0, 1.0
    return -np.inf, np.inf


def activation_forward_fn(config):
    """The input-activation quantizer and its straight-through window."""
    method, bits = config.method, config.act_bits
    if bits == 32:
        return None
    if method is QuantMethod.DOREFA:
        return (lambda a: dorefa_activation_quantize(a, bits)), (0.0, 1.0)
    if bits == 1:
        return sign_binarize, (-1.0, 1.0)
    return (lambda a: linear_quantize(a, bits, config.min_v, config.max_v)), (-1.0, 1.0)
