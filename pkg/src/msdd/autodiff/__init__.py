"""
Reverse-mode automatic differentiation over numpy buffers.
"""
from msdd.autodiff.gradcheck import gradcheck
from msdd.autodiff.ops import (
    add,
    avgpool2,
    binary_cross_entropy,
    channel_scale,
    clamp,
    conv2d,
    gather_flat,
    global_max_pool,
    linear,
    log,
    log_softmax,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    roi_max_pool,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    square,
    stack,
    sub,
    take,
    transpose,
    upsample2_nearest,
)
from msdd.autodiff.optim import OptimState, clip_grad_norm, sgd_step, zero_grad
from msdd.autodiff.tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    backward,
    current_tape,
    no_grad,
)

__all__ = [
    "NonFiniteError",
    "OptimState",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "avgpool2",
    "backward",
    "binary_cross_entropy",
    "channel_scale",
    "clamp",
    "clip_grad_norm",
    "conv2d",
    "current_tape",
    "gather_flat",
    "global_max_pool",
    "gradcheck",
    "linear",
    "log",
    "log_softmax",
    "maxpool2",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "roi_max_pool",
    "scale",
    "sgd_step",
    "sigmoid",
    "smooth_l1",
    "softmax",
    "square",
    "stack",
    "sub",
    "take",
    "transpose",
    "upsample2_nearest",
    "zero_grad",
]
