"""Reverse-mode autodiff tensor core: layer primitives, init, optimizer."""

from .gradcheck import finite_diff_gradcheck, gradcheck_suite
from .layers import (
    batchnorm2d,
    conv2d,
    deconv2d,
    global_avg_pool,
    leaky_relu,
    linear,
)
from .optim import ParamGroup, adam_step, kaiming_init
from .tensor import Tensor, concat

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "deconv2d",
    "batchnorm2d",
    "leaky_relu",
    "global_avg_pool",
    "linear",
    "ParamGroup",
    "adam_step",
    "kaiming_init",
    "finite_diff_gradcheck",
    "gradcheck_suite",
]
