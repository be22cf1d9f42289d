"""Quantization-aware layers.

Quantized conv/linear wrap full-precision shadow weights; the quantized
copy is recomputed on every forward pass and gradients reach the shadow
weights through the straight-through estimator. A layer whose position is
exempted by the config policy computes entirely in full precision.
"""

import numpy as np

from . import ops
from .errors import ConfigurationError
from .quantizers import (
    TTQ_THRESHOLD_FRACTION,
    QuantMethod,
    activation_forward_fn,
    per_channel_abs_mean,
    sign_binarize,
    weight_forward_fn,
    weight_ste_window,
)
from .tensor import Tensor

_F32 = np.float32


class Module:
    def parameters(self):
        """Ordered (name, Tensor) pairs of trainable parameters."""
        return []

    def forward(self, x, training=False):
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training)


def _policy_allows(quant, position):
    if position == "first":
        return quant.quantize_first_layer
    if position == "last":
        return quant.quantize_last_layer
    return True


class _QuantWeightMixin:
    """Shared quantize-on-forward logic for conv and linear layers."""

    def _setup_quant(self, quant, position):
        self.quant = quant
        self.position = position
        self.pos_scale = None
        self.neg_scale = None
        if self.uses_ttq:
            self.pos_scale = Tensor(np.ones(1, dtype=_F32), requires_grad=True)
            self.neg_scale = Tensor(np.ones(1, dtype=_F32), requires_grad=True)

    @property
    def quant_active(self):
        """Whether this layer's policy allows quantization at all."""
        return self.quant is not None and _policy_allows(self.quant, self.position)

    @property
    def weight_quant_active(self):
        return self.quant_active and self.quant.weight_bits < 32

    @property
    def act_quant_active(self):
        return self.quant_active and self.quant.act_bits < 32

    @property
    def uses_ttq(self):
        return (
            self.quant is not None
            and self.quant.method is QuantMethod.TTQ
            and _policy_allows(self.quant, self.position)
            and self.quant.weight_bits < 32
        )

    @property
    def clip_shadow_weights(self):
        """1-bit methods keep shadow weights inside the STE window."""
        return self.weight_quant_active and self.quant.weight_bits == 1

    @property
    def split_channel_scale(self):
        """XNOR and 1-bit DoReFa weights convolve as raw signs and apply
        their per-channel scale afterwards; the accumulation then stays
        exactly integer-valued, which the bit-packed path reproduces."""
        return (
            self.weight_quant_active
            and self.quant.weight_bits == 1
            and self.quant.method in (QuantMethod.XNORNET, QuantMethod.DOREFA)
        )

    def _quantize_input(self, x):
        if not self.act_quant_active:
            return x
        fn, (lo, hi) = activation_forward_fn(self.quant)
        return ops.ste_identity(x, fn, lo, hi)

    def _effective_weight(self):
        if not self.weight_quant_active:
            return self.weight
        if self.uses_ttq:
            return ops.ttq_quantize(
                self.weight, self.pos_scale, self.neg_scale, TTQ_THRESHOLD_FRACTION
            )
        if self.split_channel_scale:
            return ops.ste_identity(self.weight, sign_binarize, -1.0, 1.0)
        fn = weight_forward_fn(self.quant)
        lo, hi = weight_ste_window(self.quant)
        return ops.ste_identity(self.weight, fn, lo, hi)

    def weight_channel_scale(self):
        """Per-channel alpha for the split-scale path (from shadow weights)."""
        return per_channel_abs_mean(self.weight.data)

    def _quant_params(self, prefix):
        if self.uses_ttq:
            return [(f"{prefix}.pos_scale", self.pos_scale), (f"{prefix}.neg_scale", self.neg_scale)]
        return []


class QuantConv2d(Module, _QuantWeightMixin):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, bias=True,
                 quant=None, position="middle", name="conv"):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((out_ch, in_ch, k, k), dtype=_F32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=_F32), requires_grad=True) if bias else None
        self._setup_quant(quant, position)

    def parameters(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        out.extend(self._quant_params(self.name))
        return out

    def forward(self, x, training=False):
        x = self._quantize_input(x)
        w = self._effective_weight()
        if self.split_channel_scale:
            y = ops.conv2d(x, w, None, stride=self.stride, padding=self.padding)
            return ops.channel_affine(y, self.weight_channel_scale(), self.bias)
        return ops.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class QuantLinear(Module, _QuantWeightMixin):
    def __init__(self, in_dim, out_dim, bias=True, quant=None, position="middle", name="fc"):
        self.name = name
        self.weight = Tensor(np.zeros((out_dim, in_dim), dtype=_F32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=_F32), requires_grad=True) if bias else None
        self._setup_quant(quant, position)

    def parameters(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        out.extend(self._quant_params(self.name))
        return out

    def forward(self, x, training=False):
        x = self._quantize_input(x)
        w = self._effective_weight()
        if self.split_channel_scale:
            y = ops.linear(x, w, None)
            return ops.channel_affine(y, self.weight_channel_scale(), self.bias)
        return ops.linear(x, w, self.bias)


class BatchNorm(Module):
    """Channel-wise batch normalization for 2-D or 4-D activations."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, name="bn"):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=_F32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=_F32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def reset_running(self):
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def forward(self, x, training=False):
        return ops.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.eps, self.momentum, training,
        )


class Pool(Module):
    def __init__(self, kind, k, stride):
        self.kind = kind
        self.k = k
        self.stride = stride

    def forward(self, x, training=False):
        return ops.pool2d(x, self.kind, self.k, self.stride)


class Flatten(Module):
    def forward(self, x, training=False):
        return ops.flatten(x)


class GlobalAvgPool(Module):
    def forward(self, x, training=False):
        return ops.spatial_mean(x)


class Nonlinearity(Module):
    def __init__(self, kind):
        if kind not in ("relu", "hardtanh"):
            raise ConfigurationError(f"unsupported non-linearity {kind!r}")
        self.kind = kind

    def forward(self, x, training=False):
        return ops.nonlinearity(x, self.kind)


class ConvUnit(Module):
    """Conv layer plus optional batch norm and non-linearity.

    Standard order is conv -> BN -> non-linearity. When the layer runs an
    XNOR-style forward the order becomes BN -> input-quantize -> conv ->
    ReLU (the input quantizer lives inside the conv layer).
    """

    def __init__(self, conv, bn=None, nonlin=None, xnor_order=False):
        self.conv = conv
        self.bn = bn
        self.nonlin = Nonlinearity(nonlin) if isinstance(nonlin, str) else nonlin
        self.xnor_order = xnor_order

    def parameters(self):
        out = list(self.conv.parameters())
        if self.bn is not None:
            out.extend(self.bn.parameters())
        return out

    def forward(self, x, training=False):
        if self.xnor_order:
            if self.bn is not None:
                x = self.bn(x, training)
            x = self.conv(x, training)
            if self.nonlin is not None:
                x = self.nonlin(x, training)
            return x
        x = self.conv(x, training)
        if self.bn is not None:
            x = self.bn(x, training)
        if self.nonlin is not None:
            x = self.nonlin(x, training)
        return x


class LinearUnit(Module):
    """Fully connected analogue of ConvUnit."""

    def __init__(self, fc, bn=None, nonlin=None, xnor_order=False):
        self.fc = fc
        self.bn = bn
        self.nonlin = Nonlinearity(nonlin) if isinstance(nonlin, str) else nonlin
        self.xnor_order = xnor_order

    def parameters(self):
        out = list(self.fc.parameters())
        if self.bn is not None:
            out.extend(self.bn.parameters())
        return out

    def forward(self, x, training=False):
        if self.xnor_order:
            if self.bn is not None:
                x = self.bn(x, training)
            x = self.fc(x, training)
            if self.nonlin is not None:
                x = self.nonlin(x, training)
            return x
        x = self.fc(x, training)
        if self.bn is not None:
            x = self.bn(x, training)
        if self.nonlin is not None:
            x = self.nonlin(x, training)
        return x


class ResidualBlock(Module):
    """Two-conv basic block with an identity or projection shortcut.

    The shortcut path (and its projection conv/BN) always stays full
    precision; the output non-linearity follows the addition.
    """

    def __init__(self, unit1, unit2, downsample=None, nonlin="relu"):
        self.unit1 = unit1
        self.unit2 = unit2
        self.downsample = downsample
        self.nonlin = Nonlinearity(nonlin)

    def parameters(self):
        out = list(self.unit1.parameters()) + list(self.unit2.parameters())
        if self.downsample is not None:
            out.extend(self.downsample.parameters())
        return out

    def forward(self, x, training=False):
        branch = self.unit2(self.unit1(x, training), training)
        shortcut = x if self.downsample is None else self.downsample(x, training)
        return self.nonlin(ops.add(branch, shortcut), training)


class Network(Module):
    """Ordered container of modules with access to the weighted layers."""

    def __init__(self, modules, architecture, quant=None):
        self.modules = modules
        self.architecture = architecture
        self.quant = quant

    def forward(self, x, training=False):
        for m in self.modules:
            x = m(x, training)
        return x

    def parameters(self):
        return [p for m in self.modules for p in m.parameters()]

    def param_tensors(self):
        return [t for _, t in self.parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.param_tensors())

    def _walk(self, module):
        yield module
        for attr in ("conv", "fc", "bn", "unit1", "unit2", "downsample"):
            child = getattr(module, attr, None)
            if child is not None:
                yield from self._walk(child)

    def all_modules(self):
        for m in self.modules:
            yield from self._walk(m)

    def quant_layers(self):
        """Every conv/fc layer, in forward order."""
        return [m for m in self.all_modules() if isinstance(m, (QuantConv2d, QuantLinear))]

    def batchnorms(self):
        return [m for m in self.all_modules() if isinstance(m, BatchNorm)]

    def clip_tensors(self):
        """Shadow weights that are re-clipped to [-1, 1] after each step."""
        return [l.weight for l in self.quant_layers() if l.clip_shadow_weights]

    def zero_grad(self):
        for t in self.param_tensors():
            t.zero_grad()

    def state_arrays(self):
        """All persistent arrays (parameters + BN running stats), named."""
        out = {name: t.data for name, t in self.parameters()}
        for i, bn in enumerate(self.batchnorms()):
            out[f"{bn.name}#{i}.running_mean"] = bn.running_mean
            out[f"{bn.name}#{i}.running_var"] = bn.running_var
        return out
