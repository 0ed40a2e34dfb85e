"""Minimal dense-tensor core: reverse-mode gradients, layers, Adam."""

from .gradcheck import finite_difference_check, numerical_gradient
from .ops import (GRUParams, affine, cross_entropy, depthwise_conv1d, gru_forward,
                  instance_stats, mean_axis, softmax, std_axis)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, concat, log, matmul, relu, sigmoid, sqrt, tanh

__all__ = [
    "Tensor", "as_tensor", "concat", "log", "matmul", "relu", "sigmoid", "sqrt", "tanh",
    "affine", "depthwise_conv1d", "gru_forward", "GRUParams", "instance_stats",
    "mean_axis", "std_axis", "softmax", "cross_entropy",
    "Adam", "AdamState", "adam_step", "finite_difference_check", "numerical_gradient",
]
