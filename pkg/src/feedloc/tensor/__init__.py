from .autograd import (
    DisconnectedGraph,
    NumericFault,
    Tensor,
    abs_,
    add,
    backward,
    bce_loss,
    clamp,
    concat,
    exp,
    gelu,
    getitem,
    l1_loss,
    layer_norm,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    neg,
    no_grad,
    precision,
    relu,
    reshape,
    scale,
    scaled_dot_attention,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "DisconnectedGraph", "NumericFault", "Tensor", "abs_", "adam_step",
    "add", "backward", "bce_loss", "clamp", "concat", "exp", "gelu", "getitem", "l1_loss",
    "layer_norm", "log", "matmul", "mean", "mse_loss", "mul", "neg", "no_grad", "precision",
    "relu", "reshape", "scale", "scaled_dot_attention", "sigmoid", "softmax", "sub", "sum_",
    "tanh", "transpose",
]
