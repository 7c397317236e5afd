"""Tensor primitives with exact-contract gradients."""

from .engine import (
    Parameter,
    Tensor,
    absolute,
    add,
    concat,
    div,
    exp,
    getitem,
    grad_enabled,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    roll,
    sqrt,
    sub,
    take_rows,
    tmean,
    transpose,
    tsum,
)
from .gradcheck import GradCheckReport, gradient_check
from .ops import (
    DegenerateNormWarning,
    conv2d,
    gelu,
    global_grad_norm,
    layer_norm,
    leaky_relu,
    linear,
    pixel_shuffle,
    pixel_unshuffle,
    sigmoid,
    softmax,
    spectral_normalize,
)

__all__ = [
    "DegenerateNormWarning",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "absolute",
    "add",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gelu",
    "getitem",
    "global_grad_norm",
    "grad_enabled",
    "gradient_check",
    "layer_norm",
    "leaky_relu",
    "linear",
    "log",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "pixel_shuffle",
    "pixel_unshuffle",
    "power",
    "reshape",
    "roll",
    "sigmoid",
    "softmax",
    "spectral_normalize",
    "sqrt",
    "sub",
    "take_rows",
    "tmean",
    "transpose",
    "tsum",
]
