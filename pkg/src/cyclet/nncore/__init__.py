"""Tensor math, tape-based reverse-mode autodiff, AdamW and the LR staircase."""
from cyclet.nncore.ops import (
    OPS,
    add,
    conv2d,
    dense,
    depthwise_conv2d,
    forward_op,
    global_avg_pool,
    max_pool2d,
    mul,
    pointwise_conv2d,
    relu,
    softmax,
    softmax_cross_entropy,
    sum_all,
)
from cyclet.nncore.optim import GROUP_NAMES, LrSchedule, OptimState, ParamGroup, adamw_step, checksum, lr_at
from cyclet.nncore.tensor import DTYPE, Tape, Tensor, backward

__all__ = [
    "DTYPE", "GROUP_NAMES", "OPS", "LrSchedule", "OptimState", "ParamGroup", "Tape", "Tensor",
    "adamw_step", "add", "backward", "checksum", "conv2d", "dense", "depthwise_conv2d", "forward_op",
    "global_avg_pool", "lr_at", "max_pool2d", "mul", "pointwise_conv2d", "relu", "softmax",
    "softmax_cross_entropy", "sum_all",
]
