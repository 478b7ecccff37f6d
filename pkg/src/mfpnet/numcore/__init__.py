"""Tensor, tape-based reverse-mode differentiation, layers and RMSProp."""

from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .ops import (
    add, clip, concat, conv2d, conv2d_valid, conv_transpose2d, cross_entropy, dense,
    dropout, flatten, leaky_relu, log, maxpool2x2, mean, mse, mul, relu, reshape,
    sigmoid, softmax, square, sub,
)
from .ops import sum as sum_
from .optim import RMSProp, RMSPropState, rmsprop_step
from .tensor import Parameter, ShapeError, Tape, Tensor, backward, no_tape

__all__ = [
    "CheckpointError", "Parameter", "RMSProp", "RMSPropState", "ShapeError", "Tape",
    "Tensor", "add", "backward", "clip", "concat", "conv2d", "conv2d_valid",
    "conv_transpose2d", "cross_entropy", "dense", "dropout", "flatten", "leaky_relu",
    "load_checkpoint", "log", "maxpool2x2", "mean", "mse", "mul", "no_tape", "relu",
    "reshape", "restore", "rmsprop_step", "save_checkpoint", "sigmoid", "softmax",
    "square", "sub", "sum_",
]
from .gradcheck import KinkCrossing, check_gradients, relative_error
