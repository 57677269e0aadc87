"""Minimal dense tensor engine with reverse-mode autodiff, Adam and a gradient oracle."""

from . import ops
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .ops import (
    EPS_NORM, add, batch_norm, conv2d, conv_output_extent, div, exp, matmul, mean, mul, neg,
    relu, reshape, softmax, sqrt, square, sub, transpose, vector_norm,
)
from .ops import sum as tsum
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, as_tensor, backward, record_op

Tensor.__add__ = lambda a, b: ops.add(a, b)
Tensor.__radd__ = lambda a, b: ops.add(b, a)
Tensor.__sub__ = lambda a, b: ops.sub(a, b)
Tensor.__rsub__ = lambda a, b: ops.sub(b, a)
Tensor.__mul__ = lambda a, b: ops.mul(a, b)
Tensor.__rmul__ = lambda a, b: ops.mul(b, a)
Tensor.__truediv__ = lambda a, b: ops.div(a, b)
Tensor.__rtruediv__ = lambda a, b: ops.div(b, a)
Tensor.__neg__ = lambda a: ops.neg(a)
Tensor.__matmul__ = lambda a, b: ops.matmul(a, b)
Tensor.reshape = lambda a, *shape: ops.reshape(a, shape[0] if len(shape) == 1 else shape)
Tensor.sum = lambda a, axis=None, keepdims=False: ops.sum(a, axis, keepdims)

__all__ = [
    "Adam", "AdamState", "EPS_NORM", "Tape", "Tensor", "active_tape", "adam_step", "add",
    "analytic_grad", "as_tensor", "backward", "batch_norm", "conv2d", "conv_output_extent", "div",
    "exp", "grad_check", "matmul", "mean", "mul", "neg", "numeric_grad", "record_op", "relu",
    "reshape", "softmax", "sqrt", "square", "sub", "transpose", "tsum", "vector_norm",
]
