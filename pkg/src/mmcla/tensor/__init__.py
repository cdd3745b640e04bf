from .core import ShapeError, Tensor, as_tensor, grad_enabled, no_grad
from .ops import (
    BatchNormState,
    adaptive_avg_pool,
    add,
    batch_norm,
    clamp,
    concat,
    conv2d,
    conv3d,
    convnd,
    dropout,
    exp,
    flatten,
    linear,
    log,
    matmul,
    max_pool2d,
    max_pool3d,
    mean,
    mul,
    pointwise,
    pool,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    transpose,
)
from .ops import sum as tsum
from .rng import Rng
from .serialize import read_archive, read_tensor, write_archive, write_tensor

__all__ = [
    "BatchNormState",
    "Rng",
    "ShapeError",
    "Tensor",
    "adaptive_avg_pool",
    "add",
    "as_tensor",
    "batch_norm",
    "clamp",
    "concat",
    "conv2d",
    "conv3d",
    "convnd",
    "dropout",
    "exp",
    "flatten",
    "grad_enabled",
    "linear",
    "log",
    "matmul",
    "max_pool2d",
    "max_pool3d",
    "mean",
    "mul",
    "no_grad",
    "pointwise",
    "pool",
    "read_archive",
    "read_tensor",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sub",
    "transpose",
    "tsum",
    "write_archive",
    "write_tensor",
]
