from .gradcheck import GradCheckRow, NonDeterminismError, grad_check, relative_error
from .ops import (
    add,
    channel_stats,
    conv2d,
    dense,
    maxpool2d,
    mean,
    mul,
    neg,
    norm,
    relu,
    reshape,
    softmax_cross_entropy,
    sub,
    take_rows,
)
from .ops import sum as tsum
from .optim import OptState, ParamSet, sgd_step, uniform_fan_in
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward

__all__ = [
    "GradCheckRow",
    "NonDeterminismError",
    "NonFiniteError",
    "OptState",
    "ParamSet",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "channel_stats",
    "conv2d",
    "dense",
    "grad_check",
    "maxpool2d",
    "mean",
    "mul",
    "neg",
    "norm",
    "relative_error",
    "relu",
    "reshape",
    "sgd_step",
    "softmax_cross_entropy",
    "sub",
    "take_rows",
    "tsum",
    "uniform_fan_in",
]
