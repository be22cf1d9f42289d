"""Declarative model builders: LeNet-5 and the 6n+2 CIFAR ResNet family."""

import re
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .layers import (
    BatchNorm,
    ConvUnit,
    Flatten,
    GlobalAvgPool,
    LinearUnit,
    Network,
    Pool,
    QuantConv2d,
    QuantLinear,
    ResidualBlock,
)
from .quantizers import QuantConfig, QuantMethod

_F32 = np.float32


@dataclass
class ModelSpec:
    architecture: str
    num_classes: int = 10
    input_shape: Optional[Tuple[int, int, int]] = None
    quant: Optional[QuantConfig] = None
    nonlinearity: Optional[str] = None

    def __post_init__(self):
        arch = self.architecture.lower()
        if arch == "lenet5":
            expected = (1, 28, 28)
        elif re.fullmatch(r"resnet\d+", arch):
            depth = int(arch[6:])
            if (depth - 2) % 6 != 0 or depth < 8:
                raise ConfigurationError(
                    f"resnet depth must be 6n+2 with n >= 1, got {depth}"
                )
            expected = (3, 32, 32)
        else:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        self.architecture = arch
        if self.input_shape is None:
            self.input_shape = expected
        elif tuple(self.input_shape) != expected:
            raise ConfigurationError(
                f"{arch} expects input {expected}, got {tuple(self.input_shape)}"
            )

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "quant": self.quant.to_dict() if self.quant else None,
            "nonlinearity": self.nonlinearity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            architecture=d["architecture"],
            num_classes=d.get("num_classes", 10),
            input_shape=tuple(d["input_shape"]) if d.get("input_shape") else None,
            quant=QuantConfig.from_dict(d["quant"]) if d.get("quant") else None,
            nonlinearity=d.get("nonlinearity"),
        )


def _hidden_nonlin(spec):
    """Hard-tanh bounds pre-activations when they feed a [-1,1] quantizer."""
    if spec.nonlinearity is not None:
        return spec.nonlinearity
    q = spec.quant
    if q is not None and q.method is QuantMethod.QNN and q.act_bits < 32:
        return "hardtanh"
    return "relu"


def _xnor_order(quant, position):
    if quant is None or quant.method is not QuantMethod.XNORNET:
        return False
    if quant.weight_bits == 32:
        return False
    if position == "first":
        return quant.quantize_first_layer
    if position == "last":
        return quant.quantize_last_layer
    return True


def _nonlin_for(quant, position, default):
    # The XNOR forward puts ReLU after the convolution.
    return "relu" if _xnor_order(quant, position) else default


def _bn_channels(in_ch, out_ch, xnor_order):
    # XNOR ordering normalizes the unit's input, not the conv output.
    return in_ch if xnor_order else out_ch


def _lenet_conv_unit(in_ch, out_ch, q, nl, position, name, bn_name):
    xo = _xnor_order(q, position)
    return ConvUnit(
        QuantConv2d(in_ch, out_ch, 5, quant=q, position=position, name=name),
        bn=BatchNorm(_bn_channels(in_ch, out_ch, xo), name=bn_name),
        nonlin=_nonlin_for(q, position, nl),
        xnor_order=xo,
    )


def _lenet_fc_unit(in_dim, out_dim, q, nl, position, name, bn_name):
    xo = _xnor_order(q, position)
    return LinearUnit(
        QuantLinear(in_dim, out_dim, quant=q, position=position, name=name),
        bn=BatchNorm(_bn_channels(in_dim, out_dim, xo), name=bn_name),
        nonlin=_nonlin_for(q, position, nl),
        xnor_order=xo,
    )


def build_lenet5(spec):
    q = spec.quant
    nl = _hidden_nonlin(spec)
    units = [
        _lenet_conv_unit(1, 6, q, nl, "first", "conv1", "bn1"),
        Pool("max", 2, 2),
        _lenet_conv_unit(6, 16, q, nl, "middle", "conv2", "bn2"),
        Pool("max", 2, 2),
        Flatten(),
        _lenet_fc_unit(256, 120, q, nl, "middle", "fc1", "bn3"),
        _lenet_fc_unit(120, 84, q, nl, "middle", "fc2", "bn4"),
        LinearUnit(
            QuantLinear(84, spec.num_classes, quant=q, position="last", name="fc3"),
            xnor_order=_xnor_order(q, "last"),
        ),
    ]
    return Network(units, spec.architecture, quant=q)


def _resnet_conv_unit(in_ch, out_ch, stride, q, nl, name, position="middle", nonlin=True):
    xo = _xnor_order(q, position)
    return ConvUnit(
        QuantConv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False,
                    quant=q, position=position, name=name),
        bn=BatchNorm(_bn_channels(in_ch, out_ch, xo), name=f"{name}.bn"),
        nonlin=_nonlin_for(q, position, nl) if nonlin else None,
        xnor_order=xo,
    )


def build_resnet(spec):
    depth = int(spec.architecture[6:])
    n = (depth - 2) // 6
    q = spec.quant
    nl = _hidden_nonlin(spec)

    units = [_resnet_conv_unit(3, 16, 1, q, nl, "stem", position="first")]
    in_ch = 16
    for stage, out_ch in enumerate((16, 32, 64)):
        for block in range(n):
            stride = 2 if stage > 0 and block == 0 else 1
            name = f"s{stage}b{block}"
            downsample = None
            if stride != 1 or in_ch != out_ch:
                # projection shortcut: always full precision
                downsample = ConvUnit(
                    QuantConv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False,
                                quant=None, name=f"{name}.down"),
                    bn=BatchNorm(out_ch, name=f"{name}.down.bn"),
                )
            units.append(
                ResidualBlock(
                    _resnet_conv_unit(in_ch, out_ch, stride, q, nl, f"{name}.conv1"),
                    _resnet_conv_unit(out_ch, out_ch, 1, q, nl, f"{name}.conv2", nonlin=False),
                    downsample=downsample,
                    nonlin="relu" if nl == "relu" else nl,
                )
            )
            in_ch = out_ch
    units.append(GlobalAvgPool())
    units.append(
        LinearUnit(
            QuantLinear(64, spec.num_classes, quant=q, position="last", name="fc"),
            xnor_order=_xnor_order(q, "last"),
        )
    )
    return Network(units, spec.architecture, quant=q)


def build_model(spec):
    """Build the layer graph for a ModelSpec, positions tagged."""
    if spec.quant is not None:
        spec.quant.validate()
    if spec.architecture == "lenet5":
        return build_lenet5(spec)
    return build_resnet(spec)


def init_parameters(network, seed):
    """Kaiming fan-in normal init for conv/fc weights, deterministic in seed.

    Biases start at zero, BN at identity, ternary scales at one; BN running
    statistics are reset.
    """
    rng = np.random.default_rng(seed)
    for name, t in network.parameters():
        if name.endswith(".weight"):
            fan_in = int(np.prod(t.shape[1:]))
            std = float(np.sqrt(2.0 / fan_in))
            t.data[...] = rng.normal(0.0, std, size=t.shape).astype(_F32)
        elif name.endswith(".bias") or name.endswith(".beta"):
            t.data[...] = 0.0
        elif name.endswith(".gamma") or name.endswith("_scale"):
            t.data[...] = 1.0
        t.zero_grad()
    for bn in network.batchnorms():
        bn.reset_running()
