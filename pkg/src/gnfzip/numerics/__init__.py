"""Minimal dense tensor engine with reverse-mode differentiation."""
from .nn import (batch_norm, conv1d, cross_entropy, dropout, embedding, gelu, layer_norm,
                 linear, log_softmax, maxpool1d, softmax)
from .optim import RMSProp, rmsprop_step
from .tensor import (Tape, Tensor, add, as_tensor, backward, concat, div, exp, getitem, log,
                     matmul, mean, mul, relu, reshape, sqrt, sub, sum_, swapaxes, tanh,
                     transpose, zero_grad)

__all__ = [
    "Tape", "Tensor", "RMSProp", "add", "as_tensor", "backward", "batch_norm", "concat",
    "conv1d", "cross_entropy", "div", "dropout", "embedding", "exp", "gelu", "getitem",
    "layer_norm", "linear", "log", "log_softmax", "matmul", "maxpool1d", "mean", "mul",
    "relu", "reshape", "rmsprop_step", "softmax", "sqrt", "sub", "sum_", "swapaxes", "tanh",
    "transpose", "zero_grad",
]
