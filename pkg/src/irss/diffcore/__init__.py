"""Minimal dense-tensor math with reverse-mode differentiation."""
from .layers import (
    Affine,
    Architecture,
    Conv2d,
    Flatten,
    MeanPool2d,
    ModelParams,
    ReLU,
    Tanh,
    conv_architecture,
    extract,
    forward,
    head_logits,
    init_params,
    mlp_architecture,
)
from .optim import SGD, Adam, make_optimizer
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    grad_reverse,
    log_softmax,
    mean_pool2d,
    no_grad,
    softmax,
)

__all__ = [
    "Adam", "Affine", "Architecture", "Conv2d", "Flatten", "MeanPool2d", "ModelParams",
    "ReLU", "SGD", "Tanh", "Tensor", "as_tensor", "concat", "conv2d", "conv_architecture",
    "extract", "forward", "grad_reverse", "head_logits", "init_params", "log_softmax",
    "make_optimizer", "mean_pool2d", "mlp_architecture", "no_grad", "softmax",
]
