"""Tensor storage, primitives, and reverse-mode differentiation."""

from .conv_kernels import (
    conv_output_extent,
    get_conv_backend,
    same_pads,
    set_conv_backend,
)
from .gradcheck import grad_check
from .ops import (
    ConvSpec,
    add,
    add_const,
    clamp,
    clamp_min,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dense,
    div,
    exp,
    global_avg_pool,
    log,
    maxpool3d,
    mean_all,
    mul,
    mul_const,
    neg,
    pow_const,
    relu,
    scale_channels,
    sigmoid,
    sub,
    sum_all,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    scalar,
    set_finite_checks,
)

__all__ = [
    "ConvSpec", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
    "add", "add_const", "backward", "clamp", "clamp_min", "concat_channels",
    "conv3d", "conv_output_extent", "conv_transpose3d", "dense", "div", "exp",
    "get_conv_backend", "global_avg_pool", "grad_check", "log", "maxpool3d",
    "mean_all", "mul", "mul_const", "neg", "pow_const", "relu", "same_pads",
    "scalar", "scale_channels", "set_conv_backend", "set_finite_checks",
    "sigmoid", "sub", "sum_all",
]
