"""Tensor type, tape and differentiable operators."""

from .tensor import Tape, Tensor, apply_op, as_tensor, backward, set_debug
from .functional import (
    add,
    conv3d,
    conv_output_shape,
    div,
    einsum,
    gelu,
    grid_pool,
    layernorm,
    linear,
    matmul,
    maxpool3d,
    mean,
    mul,
    neg,
    pad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    take,
    transpose,
)
from .functional import sum as reduce_sum

__all__ = [
    "Tape", "Tensor", "apply_op", "as_tensor", "backward", "set_debug",
    "add", "conv3d", "conv_output_shape", "div", "einsum", "gelu", "grid_pool",
    "layernorm", "linear", "matmul", "maxpool3d", "mean", "mul", "neg", "pad",
    "reduce_sum", "relu", "reshape", "sigmoid", "softmax", "sub", "take", "transpose",
]
