"""Minimal float64 autodiff engine used by the tagger."""
from . import kernels
from .optim import SGD, Adam, make_optimizer
from .rng import Rng
from .tensor import (
    GraphCycleError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    exp,
    gather_rows,
    gelu,
    grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    primitive,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    sum,
    transpose,
)

__all__ = [
    "Adam", "GraphCycleError", "NonFiniteError", "Rng", "SGD", "ShapeError", "Tensor",
    "add", "as_tensor", "backward", "clamp_min", "concat", "exp", "gather_rows", "gelu",
    "grad_enabled", "kernels", "layer_norm", "linear", "log", "log_softmax", "make_optimizer",
    "matmul", "mean", "mul", "no_grad", "primitive", "relu", "reshape", "scale",
    "softmax", "sub", "sum", "transpose",
]
