"""Minimal reverse-mode automatic differentiation over NumPy arrays."""
from .gradcheck import GradCheckReport, check_gradients, relative_error
from .nn import (
    activation,
    batch_norm,
    binary_cross_entropy,
    conv2d,
    conv_transpose2d,
    relu,
    sigmoid,
    softplus,
)
from .tensor import Tensor, add, as_tensor, backward, clip, concat, log, mean, mul, reshape, sub, sum_, tape

__all__ = [
    "GradCheckReport",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "binary_cross_entropy",
    "check_gradients",
    "clip",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "log",
    "mean",
    "mul",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "softplus",
    "sub",
    "sum_",
    "tape",
]
