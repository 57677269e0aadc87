"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """Apply one Adam update in place.

    Parameters with ``requires_grad`` off (frozen) or without a gradient are
    left untouched, but the shared step counter still advances.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** t
    corr2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not p.requires_grad:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimizer state for {name!r} has shape {m.shape}, parameter has {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step` over a named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)
