"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractError
from .tensor import Tape, Tensor


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(()))


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    saved = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
            _scalar(out)
        tape.backward(out)
        g = np.zeros_like(x.data) if x.grad is None else x.grad
    finally:
        x.requires_grad, x.grad = saved
    return g


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Perturbs ``x.data`` in place coordinate by coordinate; restores it afterwards."""
    flat = x.data.reshape(-1)
    g = np.zeros(flat.shape, dtype=np.float64)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = _scalar(f(x))
        flat[k] = orig - h
        fm = _scalar(f(x))
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` may close over ``x`` instead of using its argument (handy for model
    parameters); either way ``x.data`` is what gets perturbed.
    """
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, h)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
