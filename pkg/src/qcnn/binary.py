"""Bit-packed inference for binary-weight models.

Sign tensors pack 64 elements per machine word (bit 1 means +1); the dot
product of two packed streams is n - 2*popcount(a XOR b). Zero-padded
border positions carry a validity mask so the packed convolution
reproduces the float path's zero padding exactly.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .backend import kernels
from .errors import ContractError, DimensionError, FormatError
from .layers import ConvUnit, LinearUnit, QuantConv2d, QuantLinear
from .quantizers import QuantMethod, per_channel_abs_mean

_F32 = np.float32

BINARY_MODEL_MAGIC = b"QBM1"
BINARY_MODEL_VERSION = 1


@dataclass
class PackedTensor:
    """A {-1,+1} tensor stored one bit per element in 64-bit words.

    words is [rows, words_per_row]; a plain vector/tensor packs as a single
    row. logical_len counts live bits across all rows; tail bits are zero.
    """

    words: np.ndarray
    logical_len: int
    shape: tuple
    row_bits: int
    mask: Optional[np.ndarray] = None  # live-bit mask rows; None = all live
    nvalid: Optional[np.ndarray] = None  # live bits per row

    @property
    def words_per_row(self):
        return self.words.shape[1]


def _pack_rows_u8(bits):
    """Pack a uint8 0/1 matrix [R,K] into little-endian uint64 words."""
    r, k = bits.shape
    words_per_row = (k + 63) // 64
    packed8 = np.packbits(bits, axis=1, bitorder="little")
    if packed8.shape[1] != words_per_row * 8:
        padded = np.zeros((r, words_per_row * 8), dtype=np.uint8)
        padded[:, : packed8.shape[1]] = packed8
        packed8 = padded
    return packed8.view("<u8").reshape(r, words_per_row)


def pack(x):
    """Pack a strict {-1,+1} tensor into one bit per element."""
    x = np.asarray(x, dtype=_F32)
    flat = x.reshape(-1)
    bad = np.nonzero(np.abs(flat) != 1.0)[0]
    if bad.size:
        i = int(bad[0])
        raise ContractError(f"pack: element {i} is {flat[i]!r}, not +1/-1")
    words = _pack_rows_u8((flat > 0).astype(np.uint8).reshape(1, -1))
    return PackedTensor(words=words, logical_len=flat.size, shape=x.shape,
                        row_bits=flat.size)


def unpack(pt):
    """Inverse of pack: the original {-1,+1} float32 tensor."""
    bytes_view = pt.words.reshape(-1).view(np.uint8)
    bits = np.unpackbits(bytes_view, bitorder="little")
    rows = pt.words.shape[0]
    per_row = pt.words_per_row * 64
    bits = bits.reshape(rows, per_row)[:, : pt.row_bits]
    vals = np.where(bits, _F32(1.0), _F32(-1.0)).reshape(-1)[: pt.logical_len]
    return vals.reshape(pt.shape)


def xnor_popcount_dot(a, b):
    """Integer dot product of two packed {-1,+1} vectors."""
    if a.logical_len != b.logical_len:
        raise DimensionError(
            f"xnor_popcount_dot: lengths differ, {a.logical_len} vs {b.logical_len}"
        )
    x = np.bitwise_xor(a.words.reshape(-1), b.words.reshape(-1))
    # tails of both operands are zero, so XOR tails contribute no set bits
    total = int(np.bitwise_count(x).sum(dtype=np.int64))
    return a.logical_len - 2 * total


def pack_rows(matrix):
    """Pack each row of a {-1,+1} matrix; rows become packed filters."""
    m = np.asarray(matrix, dtype=_F32)
    return _pack_rows_u8((m > 0).astype(np.uint8))


def pack_patches(x, kh, kw, stride, padding):
    """im2row activations in {-1,0,+1} and pack each patch with a live mask.

    Zero elements (padding or zero-valued 1-bit activations) become dead
    bits: masked out of the popcount and excluded from the per-patch live
    count, so they contribute nothing to the dot product, exactly like the
    float path.
    """
    x = np.asarray(x, dtype=_F32)
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dense = padding == 0 and bool(np.all(x != 0))
    # work in uint8 from the start; the im2row copy is 4x smaller than f32
    pos = np.zeros((n, c, hp, wp), dtype=np.uint8)
    pos[:, :, padding : padding + h, padding : padding + w] = x > 0

    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    k = c * kh * kw
    rows = n * oh * ow
    from numpy.lib.stride_tricks import sliding_window_view

    def im2row(a):
        win = sliding_window_view(a, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # [N,OH,OW,C,kH,kW] -> row-per-patch, reduction axis contiguous
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(rows, k)

    words = _pack_rows_u8(im2row(pos))
    if dense:
        # every bit live: the unmasked popcount identity applies
        return PackedTensor(words=words, logical_len=rows * k, shape=(n, oh, ow, k),
                            row_bits=k)
    if bool(np.all(x != 0)):
        # only the padded border is dead, so the mask is pure geometry:
        # compute it for one image and tile over the batch
        live1 = np.zeros((1, c, hp, wp), dtype=np.uint8)
        live1[:, :, padding : padding + h, padding : padding + w] = 1
        win = sliding_window_view(live1, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        live_rows1 = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(oh * ow, k)
        mask = np.tile(_pack_rows_u8(live_rows1), (n, 1))
        nvalid = np.tile(live_rows1.sum(axis=1, dtype=np.int32), n)
    else:
        live = np.zeros((n, c, hp, wp), dtype=np.uint8)
        live[:, :, padding : padding + h, padding : padding + w] = x != 0
        live_rows = im2row(live)
        mask = _pack_rows_u8(live_rows)
        nvalid = live_rows.sum(axis=1, dtype=np.int32)
    return PackedTensor(words=words, logical_len=rows * k, shape=(n, oh, ow, k),
                        row_bits=k, mask=mask, nvalid=nvalid)


# ---------------------------------------------------------------------------
# binary model layers
# ---------------------------------------------------------------------------


@dataclass
class BinaryConv:
    words: np.ndarray  # [F, words_per_row] packed filters
    alpha: np.ndarray  # [F] scales (ones for scale-free methods)
    bias: Optional[np.ndarray]
    in_channels: int
    kh: int
    kw: int
    stride: int
    padding: int
    kind: str = "binary_conv"


@dataclass
class BinaryLinear:
    words: np.ndarray  # [K, words_per_row]
    alpha: np.ndarray
    bias: Optional[np.ndarray]
    in_features: int
    kind: str = "binary_linear"


@dataclass
class FloatConv:
    weight: np.ndarray
    bias: Optional[np.ndarray]
    stride: int
    padding: int
    kind: str = "float_conv"


@dataclass
class FloatLinear:
    weight: np.ndarray
    bias: Optional[np.ndarray]
    kind: str = "float_linear"


@dataclass
class BatchNormEval:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float
    kind: str = "batchnorm"


@dataclass
class SignThreshold:
    """Folded BN followed by sign: +1 where (x - thresh) has the channel's
    polarity, with constant channels for zero gamma."""

    thresh: np.ndarray  # [C]
    flipped: np.ndarray  # [C] uint8, 1 when gamma < 0
    const: np.ndarray  # [C] int8, 0 live or the fixed +-1 output
    kind: str = "sign_threshold"


@dataclass
class Activation:
    op: str  # sign | hardtanh | relu | dorefa_a1
    kind: str = "activation"


@dataclass
class PoolLayer:
    op: str  # max | avg
    k: int
    stride: int
    kind: str = "pool"


@dataclass
class Reshape:
    op: str  # flatten | global_avg
    kind: str = "reshape"


@dataclass
class BinaryModel:
    layers: List[object] = field(default_factory=list)

    def forward(self, images):
        x = np.ascontiguousarray(images, dtype=_F32)
        for layer in self.layers:
            x = _run_layer(layer, x)
        return x

    def packed_payload_bits(self):
        """(packed_bits, float_bits) for the bit-packed weight tensors."""
        packed = 0
        for l in self.layers:
            if isinstance(l, BinaryConv):
                packed += l.words.shape[0] * l.in_channels * l.kh * l.kw
            elif isinstance(l, BinaryLinear):
                packed += l.words.shape[0] * l.in_features
        return packed, packed * 32


def binary_conv2d(packed_patches, layer):
    """alpha[f] * (masked XNOR-popcount dot) per patch, plus bias."""
    if packed_patches.row_bits != layer.in_channels * layer.kh * layer.kw:
        raise DimensionError(
            f"binary_conv2d: patch bits {packed_patches.row_bits} != "
            f"filter size {layer.in_channels * layer.kh * layer.kw}"
        )
    if packed_patches.mask is None:
        dots = kernels.xnor_dot_rows_dense(packed_patches.words, layer.words,
                                           packed_patches.row_bits)
    else:
        dots = kernels.xnor_dot_rows(packed_patches.words, packed_patches.mask,
                                     layer.words, packed_patches.nvalid)
    n, oh, ow, _ = packed_patches.shape
    f = layer.words.shape[0]
    y = dots.reshape(n, oh, ow, f).transpose(0, 3, 1, 2).astype(_F32)
    y = y * layer.alpha.reshape(1, f, 1, 1)
    if layer.bias is not None:
        y = y + layer.bias.reshape(1, f, 1, 1)
    return y


def _binary_linear(x, layer):
    words = _pack_rows_u8((x > 0).astype(np.uint8))
    if np.all(x != 0):
        dots = kernels.xnor_dot_rows_dense(words, layer.words, x.shape[1])
    else:
        live = (x != 0).astype(np.uint8)
        dots = kernels.xnor_dot_rows(words, _pack_rows_u8(live), layer.words,
                                     live.sum(axis=1, dtype=np.int32))
    y = dots.astype(_F32) * layer.alpha.reshape(1, -1)
    if layer.bias is not None:
        y = y + layer.bias.reshape(1, -1)
    return y


def _run_layer(layer, x):
    if isinstance(layer, BinaryConv):
        patches = pack_patches(x, layer.kh, layer.kw, layer.stride, layer.padding)
        return binary_conv2d(patches, layer)
    if isinstance(layer, BinaryLinear):
        return _binary_linear(x, layer)
    if isinstance(layer, FloatConv):
        xp = x
        if layer.padding:
            n, c, h, w = x.shape
            xp = np.zeros((n, c, h + 2 * layer.padding, w + 2 * layer.padding), dtype=_F32)
            xp[:, :, layer.padding : layer.padding + h, layer.padding : layer.padding + w] = x
        y = kernels.conv2d_forward(xp, layer.weight, layer.stride)
        if layer.bias is not None:
            y = y + layer.bias.reshape(1, -1, 1, 1)
        return y
    if isinstance(layer, FloatLinear):
        y = x @ layer.weight.T
        if layer.bias is not None:
            y = y + layer.bias
        return y
    if isinstance(layer, BatchNormEval):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        inv = (1.0 / np.sqrt(layer.var + layer.eps)).astype(_F32)
        return ((x - layer.mean.astype(_F32).reshape(shape)) * inv.reshape(shape)
                * layer.gamma.reshape(shape) + layer.beta.reshape(shape))
    if isinstance(layer, SignThreshold):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        t = layer.thresh.reshape(shape)
        flip = layer.flipped.reshape(shape).astype(bool)
        y = np.where(np.where(flip, x <= t, x >= t), _F32(1.0), _F32(-1.0))
        const = layer.const.reshape(shape)
        return np.where(const != 0, const.astype(_F32), y)
    if isinstance(layer, Activation):
        if layer.op == "sign":
            return np.where(x >= 0, _F32(1.0), _F32(-1.0))
        if layer.op == "hardtanh":
            return np.clip(x, -1.0, 1.0)
        if layer.op == "relu":
            return np.maximum(x, 0.0)
        if layer.op == "dorefa_a1":
            return np.trunc(np.clip(x, 0.0, 1.0) + _F32(0.5))
        raise ContractError(f"unknown activation {layer.op!r}")
    if isinstance(layer, PoolLayer):
        if layer.op == "max":
            y, _ = kernels.maxpool2d_forward(x, layer.k, layer.stride)
            return y
        return kernels.avgpool2d_forward(x, layer.k, layer.stride)
    if isinstance(layer, Reshape):
        if layer.op == "flatten":
            return x.reshape(x.shape[0], -1)
        return x.mean(axis=(2, 3), dtype=np.float64).astype(_F32)
    raise ContractError(f"unknown binary model layer {layer!r}")


# ---------------------------------------------------------------------------
# export from a trained model
# ---------------------------------------------------------------------------


def _act_layer_for(quant):
    if quant.method is QuantMethod.DOREFA:
        return Activation("dorefa_a1")
    return Activation("sign")


def _export_weight_layers(layer):
    """The binary-model layers equivalent to one QuantConv2d/QuantLinear."""
    out = []
    if layer.act_quant_active:
        if layer.quant.act_bits != 1:
            raise ContractError(
                f"export: activation bits must be 1 or 32, got {layer.quant.act_bits}"
            )
        out.append(_act_layer_for(layer.quant))
    w = layer.weight.data
    bias = layer.bias.data.copy() if layer.bias is not None else None
    if layer.weight_quant_active:
        signs = np.where(w >= 0, _F32(1.0), _F32(-1.0))
        if layer.split_channel_scale:
            alpha = per_channel_abs_mean(w)
        else:  # QNN binarization carries no scaling factors
            alpha = np.ones(w.shape[0], dtype=_F32)
        packed = pack_rows(signs.reshape(w.shape[0], -1))
        if isinstance(layer, QuantConv2d):
            out.append(BinaryConv(packed, alpha, bias, w.shape[1], w.shape[2],
                                  w.shape[3], layer.stride, layer.padding))
        else:
            out.append(BinaryLinear(packed, alpha, bias, w.shape[1]))
    else:
        if isinstance(layer, QuantConv2d):
            out.append(FloatConv(w.copy(), bias, layer.stride, layer.padding))
        else:
            out.append(FloatLinear(w.copy(), bias))
    return out


def _export_unit(unit):
    core = unit.conv if isinstance(unit, ConvUnit) else unit.fc
    bn = BatchNormEval(unit.bn.gamma.data.copy(), unit.bn.beta.data.copy(),
                       unit.bn.running_mean.copy(), unit.bn.running_var.copy(),
                       unit.bn.eps) if unit.bn is not None else None
    nonlin = Activation(unit.nonlin.kind) if unit.nonlin is not None else None
    layers = []
    if unit.xnor_order:
        if bn:
            layers.append(bn)
        layers.extend(_export_weight_layers(core))
        if nonlin:
            layers.append(nonlin)
    else:
        layers.extend(_export_weight_layers(core))
        if bn:
            layers.append(bn)
        if nonlin:
            layers.append(nonlin)
    return layers


def _fold_bn_sign(layers):
    """Peephole: [BN, sign] and [BN, hardtanh, sign] become a per-channel
    threshold (hard-tanh is sign-transparent). Other BNs stay in float."""
    out = []
    i = 0
    while i < len(layers):
        l = layers[i]
        if isinstance(l, BatchNormEval):
            j = i + 1
            if j < len(layers) and isinstance(layers[j], Activation) \
                    and layers[j].op == "hardtanh":
                j += 1
            if j < len(layers) and isinstance(layers[j], Activation) \
                    and layers[j].op == "sign":
                sigma = np.sqrt(l.var + l.eps)
                gamma = l.gamma.astype(np.float64)
                with np.errstate(divide="ignore", invalid="ignore"):
                    thresh = l.mean - l.beta.astype(np.float64) * sigma / gamma
                flipped = (gamma < 0).astype(np.uint8)
                const = np.where(gamma == 0,
                                 np.where(l.beta >= 0, 1, -1), 0).astype(np.int8)
                thresh = np.where(gamma == 0, 0.0, thresh)
                out.append(SignThreshold(thresh.astype(_F32), flipped, const))
                i = j + 1
                continue
        out.append(l)
        i += 1
    return out


def export_binary_model(model, fold_bn=True):
    """Snapshot an eval-mode W1 model into the bit-packed deployment form.

    Quantized layers pack sign(shadow weight) with their per-channel scales;
    exempt layers stay full precision; BN folds into a sign threshold only
    where a sign quantizer immediately follows it.
    """
    if model.quant is None or model.quant.weight_bits != 1:
        raise ContractError(
            "export_binary_model needs a model trained with 1-bit weights"
        )
    layers = []
    for unit in model.modules:
        if isinstance(unit, (ConvUnit, LinearUnit)):
            layers.extend(_export_unit(unit))
        elif type(unit).__name__ == "Pool":
            layers.append(PoolLayer(unit.kind, unit.k, unit.stride))
        elif type(unit).__name__ == "Flatten":
            layers.append(Reshape("flatten"))
        elif type(unit).__name__ == "GlobalAvgPool":
            layers.append(Reshape("global_avg"))
        else:
            raise ContractError(
                f"export_binary_model: unsupported module {type(unit).__name__}"
            )
    if fold_bn:
        layers = _fold_bn_sign(layers)
    return BinaryModel(layers)


# ---------------------------------------------------------------------------
# QBM1 file format
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = {
    "binary_conv": ("words", "alpha", "bias"),
    "binary_linear": ("words", "alpha", "bias"),
    "float_conv": ("weight", "bias"),
    "float_linear": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
    "sign_threshold": ("thresh", "flipped", "const"),
    "activation": (),
    "pool": (),
    "reshape": (),
}

_SCALAR_FIELDS = {
    "binary_conv": ("in_channels", "kh", "kw", "stride", "padding"),
    "binary_linear": ("in_features",),
    "float_conv": ("stride", "padding"),
    "float_linear": (),
    "batchnorm": ("eps",),
    "sign_threshold": (),
    "activation": ("op",),
    "pool": ("op", "k", "stride"),
    "reshape": ("op",),
}

_LAYER_TYPES = {
    "binary_conv": BinaryConv,
    "binary_linear": BinaryLinear,
    "float_conv": FloatConv,
    "float_linear": FloatLinear,
    "batchnorm": BatchNormEval,
    "sign_threshold": SignThreshold,
    "activation": Activation,
    "pool": PoolLayer,
    "reshape": Reshape,
}


def save_binary_model(model, path):
    """Deterministic little-endian serialization: magic, version, a JSON
    layer table, then the raw arrays in table order."""
    header = []
    blobs = []
    for layer in model.layers:
        kind = layer.kind
        entry = {"kind": kind, "arrays": [], **{k: getattr(layer, k)
                                                for k in _SCALAR_FIELDS[kind]}}
        for name in _ARRAY_FIELDS[kind]:
            arr = getattr(layer, name)
            if arr is None:
                entry["arrays"].append({"name": name, "none": True})
                continue
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            entry["arrays"].append(
                {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            )
            blobs.append(le.tobytes())
        header.append(entry)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(BINARY_MODEL_MAGIC)
        f.write(bytes([BINARY_MODEL_VERSION]))
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_binary_model(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BINARY_MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected QBM1")
        version = f.read(1)[0]
        if version != BINARY_MODEL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (head_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(head_len).decode())
        layers = []
        for entry in header:
            kind = entry["kind"]
            kwargs = {k: entry[k] for k in _SCALAR_FIELDS[kind]}
            for spec in entry["arrays"]:
                if spec.get("none"):
                    kwargs[spec["name"]] = None
                    continue
                dtype = np.dtype(spec["dtype"])
                count = int(np.prod(spec["shape"])) if spec["shape"] else 1
                raw = f.read(count * dtype.itemsize)
                arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
                kwargs[spec["name"]] = arr.reshape(spec["shape"])
            layers.append(_LAYER_TYPES[kind](**kwargs))
        return BinaryModel(layers)


def evaluate_binary_topk(model, dataset, k=1, batch_size=512):
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.images[start : start + batch_size])
        labels = dataset.labels[start : start + batch_size]
        topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        correct += int((topk == labels[:, None]).any(axis=1).sum())
    return 100.0 * correct / len(dataset)
