"""Minimal reverse-mode (and forward-tangent) differentiation engine."""

from .functional import grad, jvp, value_and_grad, vjp
from .ops import (
    add,
    conv2d_circular,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)
from .optim import Adam, AdamState, adam_step
from .tensor import AutodiffError, Parameter, Tensor, as_tensor, grad_enabled, no_grad

mse_loss = mse

__all__ = [
    "Tensor",
    "Parameter",
    "AutodiffError",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "scale",
    "matmul",
    "linear",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "mean",
    "mse",
    "mse_loss",
    "conv2d_circular",
    "reshape",
    "transpose",
    "grad",
    "jvp",
    "vjp",
    "value_and_grad",
    "Adam",
    "AdamState",
    "adam_step",
]
