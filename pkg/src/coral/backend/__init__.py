"""Numerical core: tensors, reverse-mode autodiff, Adam, checkpoints."""

from .checkpoint import MAGIC, load_arrays, save_arrays
from .gradcheck import finite_difference_check, max_relative_error
from .optim import OptimizerState, ParameterStore, adam_step, clip_grads, global_grad_norm
from .tensor import (
    Tensor,
    add,
    avg_pool_time,
    concat,
    dropout,
    embedding,
    exp,
    gather_last,
    gelu,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    max_pool_time,
    mean,
    mul,
    reduce_max,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "MAGIC",
    "OptimizerState",
    "ParameterStore",
    "Tensor",
    "adam_step",
    "add",
    "avg_pool_time",
    "clip_grads",
    "concat",
    "dropout",
    "embedding",
    "exp",
    "finite_difference_check",
    "gather_last",
    "gelu",
    "global_grad_norm",
    "layer_norm",
    "load_arrays",
    "log",
    "log_softmax",
    "masked_fill",
    "matmul",
    "max_pool_time",
    "max_relative_error",
    "mean",
    "mul",
    "reduce_max",
    "relu",
    "reshape",
    "save_arrays",
    "sigmoid",
    "softmax",
    "softplus",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]
