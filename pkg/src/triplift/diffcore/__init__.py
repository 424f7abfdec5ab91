"""Minimal tape-based reverse-mode autodiff over dense tensors."""

from .tape import (
    DEFAULT_DTYPE,
    ShapeError,
    Tape,
    TapeTensor,
    active_tape,
    as_tensor,
    constant,
)
from .ops import (
    add_channel_bias,
    BatchNormState,
    add,
    batch_norm,
    bilinear_sample2d,
    concat,
    conv2d,
    cumsum,
    div,
    exp,
    gather_rows,
    gelu,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    scale_last,
    sigmoid,
    slice_axis,
    softmax,
    sub,
    tsum,
    upsample2x,
)
from .gradcheck import FD_STEP, REL_TOL, check_gradients, finite_difference, rel_error

__all__ = [
    "DEFAULT_DTYPE",
    "ShapeError",
    "Tape",
    "TapeTensor",
    "active_tape",
    "as_tensor",
    "constant",
    "BatchNormState",
    "add",
    "add_channel_bias",
    "batch_norm",
    "bilinear_sample2d",
    "concat",
    "conv2d",
    "cumsum",
    "div",
    "exp",
    "gather_rows",
    "gelu",
    "linear",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "permute",
    "relu",
    "reshape",
    "scale",
    "scale_last",
    "sigmoid",
    "slice_axis",
    "softmax",
    "sub",
    "tsum",
    "upsample2x",
    "FD_STEP",
    "REL_TOL",
    "check_gradients",
    "finite_difference",
    "rel_error",
]
