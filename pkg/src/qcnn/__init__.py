"""Quantization-aware CNN training and bit-packed binary inference."""

__version__ = "0.1.0"

from .backend import BACKEND
from .quantizers import QuantConfig, QuantMethod, TernaryScales
from .tensor import Graph, Tensor, backward, get_graph, no_grad

__all__ = [
    "BACKEND",
    "Graph",
    "QuantConfig",
    "QuantMethod",
    "Tensor",
    "TernaryScales",
    "backward",
    "get_graph",
    "no_grad",
    "__version__",
]
