"""Minimal reverse-mode tensor engine with higher-order gradients."""
from . import ops
from .gradcheck import finite_diff_grad, rel_err
from .nn import conv2d, global_max_pool, group_norm, linear, max_pool2d, relu, softmax_cross_entropy
from .tape import Tape, Tensor, backward, grad

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad",
    "ops",
    "conv2d",
    "relu",
    "max_pool2d",
    "global_max_pool",
    "linear",
    "group_norm",
    "softmax_cross_entropy",
    "finite_diff_grad",
    "rel_err",
]
