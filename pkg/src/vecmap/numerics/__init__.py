from .functional import bilinear_sample, bilinear_sample_hwc, clamp_prob, layer_norm, scaled_dot_attention, softmax
from .gradcheck import grad_check
from .tensor import (
    ComputeGraph,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    div,
    exp,
    grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    split,
    stack,
    sub,
    tabs,
    take,
    transpose,
    tsum,
)

__all__ = [
    "ComputeGraph",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "bilinear_sample",
    "bilinear_sample_hwc",
    "clamp_prob",
    "clip",
    "concat",
    "div",
    "exp",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "relu",
    "scaled_dot_attention",
    "reshape",
    "sigmoid",
    "softmax",
    "split",
    "stack",
    "sub",
    "tabs",
    "take",
    "transpose",
    "tsum",
]
