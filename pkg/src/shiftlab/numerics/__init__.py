"""Minimal tensor library with reverse-mode autodiff."""

from .gradcheck import finite_diff_check, relative_error
from .ops import (
    add,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mean,
    mse_loss,
    mul,
    patchify,
    reshape,
    scale,
    silu,
    slice_,
    softmax_lastdim,
    square,
    sub,
    sum_,
    transpose,
    unpatchify,
)
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    finite_checks,
    grad_enabled,
    no_grad,
    parameter,
    precision,
)

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "concat", "default_dtype", "embedding",
    "finite_checks", "finite_diff_check", "gelu", "grad_enabled", "layer_norm", "matmul",
    "mean", "mse_loss", "mul", "no_grad", "parameter", "patchify", "precision",
    "relative_error", "reshape", "scale", "silu", "slice_", "softmax_lastdim", "square",
    "sub", "sum_", "transpose", "unpatchify",
]
