"""Autodiff substrate: tensors, layers, optimizer, gradient verification."""

from . import nn, optim
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    Tensor, absolute, add, as_tensor, avg_pool2d, broadcast_to, clip, concat,
    conv2d, conv2d_input_grad, conv2d_weight_grad, cos, div, elu, exp, flip,
    grad_of, leaky_relu, linear, log, matmul, mul, neg, no_grad, pad2d, pow,
    relu, reshape, scatter_add, sigmoid, sin, softplus, sqrt, stack, sub,
    take, tanh, tmean, transpose, tsum, upsample_nearest, where_mask,
)

__all__ = [
    "Tensor", "as_tensor", "no_grad", "grad_of", "gradcheck", "GradcheckReport",
    "nn", "optim",
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "absolute",
    "sin", "cos", "tanh", "sigmoid", "softplus", "elu", "leaky_relu", "relu",
    "clip", "tsum", "tmean", "matmul", "reshape", "transpose", "concat",
    "broadcast_to", "flip", "pad2d", "upsample_nearest", "take", "scatter_add",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad", "avg_pool2d",
    "linear", "stack", "where_mask",
]
