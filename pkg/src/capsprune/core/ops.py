"""Differentiable primitives.

Only the operations the capsule pipeline needs are provided. Every op
preserves the floating dtype of its tensor inputs; plain numbers and arrays
are accepted as constants and cast to that dtype.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor, as_tensor, record_op

# Smoothing inside vector_norm so gradients stay finite at the origin.
EPS_NORM = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return record_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return record_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return record_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), back, "div")


def neg(x: Tensor) -> Tensor:
    return record_op(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    return record_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    return record_op(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,), "exp")


# -- reductions and shape -----------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(ax % ndim for ax in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def vector_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Smoothed Euclidean norm ``sqrt(sum(x**2) + EPS_NORM)`` along ``axis``."""
    (ax,) = _norm_axis(axis, x.ndim)
    with np.errstate(over="ignore"):  # overflow is reported by record_op as NonFiniteError
        n = np.sqrt(np.sum(x.data * x.data, axis=ax, keepdims=True) + EPS_NORM)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * x.data / n,)

    out = n if keepdims else np.squeeze(n, axis=ax)
    return record_op(out, (x,), back, "vector_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return record_op(y, (x,), back, "softmax")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), back, "matmul")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with OIHW filters (im2col + one GEMM)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be positive and padding non-negative")
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)

    xp = x.data.transpose(1, 0, 2, 3)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hi:stride, j:j + wi:stride]
    cols2 = cols.reshape(c * kh * kw, n * oh * ow)
    w2 = weight.data.reshape(co, -1)
    out = (w2 @ cols2).reshape(co, n, oh, ow)
    if bias is not None:
        out += bias.data.reshape(co, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hi:stride, j:j + wi:stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, parents, back, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of an NCHW batch.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // c
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // c
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return record_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "batch_norm")
