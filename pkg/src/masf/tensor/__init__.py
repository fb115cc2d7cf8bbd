from masf.tensor.core import Tensor, grad_enabled, no_grad
from masf.tensor.gradcheck import grad_check
from masf.tensor.ops import (
    ConvSpec,
    activation,
    add,
    batchnorm_infer,
    batchnorm_train,
    concat,
    conv2d,
    count_flops,
    groupnorm,
    matmul,
    mul,
    normalize,
    pool,
    reshape,
    resize_nearest,
    sigmoid,
    silu,
    softmax_channels,
    split,
    sub,
    swap_hw,
    total,
)

__all__ = [
    "ConvSpec", "Tensor", "activation", "add", "batchnorm_infer", "batchnorm_train", "concat",
    "conv2d", "count_flops", "grad_check", "grad_enabled", "groupnorm", "matmul", "mul",
    "no_grad", "normalize", "pool", "reshape", "resize_nearest", "sigmoid", "silu",
    "softmax_channels", "split", "sub", "swap_hw", "total",
]
