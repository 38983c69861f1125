from . import ops
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .ops import (
    add,
    concat,
    conv2d_transpose,
    conv2d_valid,
    exp,
    getitem,
    leaky_relu,
    linear,
    log,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    square,
    sub,
    tanh,
    upsample_nn2,
)
from .ops import sum as sum_
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, backward, default_dtype, grad_enabled, no_grad, precision, set_debug

__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d_transpose",
    "conv2d_valid",
    "default_dtype",
    "exp",
    "getitem",
    "grad_enabled",
    "leaky_relu",
    "linear",
    "load_checkpoint",
    "log",
    "maxpool2",
    "mean",
    "mul",
    "no_grad",
    "ops",
    "precision",
    "relu",
    "reshape",
    "save_checkpoint",
    "set_debug",
    "square",
    "sub",
    "sum_",
    "tanh",
    "upsample_nn2",
]
