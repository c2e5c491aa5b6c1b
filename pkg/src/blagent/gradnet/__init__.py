"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .params import ParamSpec, ParamStore, init_value, load_sidecar
from .tensor import (
    OPS,
    Tensor,
    abs_,
    add,
    backward,
    concat,
    constant,
    conv2d,
    diag_embed,
    diag_part,
    div,
    gelu,
    grad_enabled,
    layer_norm,
    leaf,
    log_sigmoid,
    matmul,
    maxpool2d,
    mean_all,
    mul,
    narrow,
    neg,
    no_grad,
    op_set,
    reshape,
    scale,
    softmax_rows,
    softplus,
    spd_factor,
    spd_solve,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "OPS",
    "ParamSpec",
    "ParamStore",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "concat",
    "constant",
    "conv2d",
    "diag_embed",
    "diag_part",
    "div",
    "gelu",
    "grad_enabled",
    "init_value",
    "layer_norm",
    "leaf",
    "load_sidecar",
    "log_sigmoid",
    "matmul",
    "maxpool2d",
    "mean_all",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "op_set",
    "reshape",
    "scale",
    "softmax_rows",
    "softplus",
    "spd_factor",
    "spd_solve",
    "sub",
    "sum_all",
    "transpose",
]
