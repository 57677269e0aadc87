"""Capsule layers: votes, routing-by-agreement, squash and the margin loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core as C
from .core import Tensor
from .errors import ConfigError, InputError, ShapeError


@dataclass
class CapsLayerParams:
    """Transformation matrices ``W[i, j]`` mapping D1-dim input poses to D2-dim votes."""

    W: Tensor  # [I, J, D2, D1]
    r: int = 3

    def __post_init__(self):
        if self.W.ndim != 4:
            raise ShapeError(f"W must be [I, J, D2, D1], got {self.W.shape}")
        if self.r < 1:
            raise ConfigError(f"routing iterations must be >= 1, got {self.r}")

    @property
    def I(self) -> int:  # noqa: E743
        return self.W.shape[0]

    @property
    def J(self) -> int:
        return self.W.shape[1]

    @property
    def D2(self) -> int:
        return self.W.shape[2]

    @property
    def D1(self) -> int:
        return self.W.shape[3]


def init_caps_layer(I: int, J: int, D1: int, D2: int, r: int, rng: np.random.Generator,
                    dtype=np.float32) -> CapsLayerParams:
    if min(I, J, D1, D2) < 1:
        raise ConfigError(f"capsule dimensions must be >= 1, got I={I} J={J} D1={D1} D2={D2}")
    bound = np.sqrt(6.0 / D1)
    W = rng.uniform(-bound, bound, size=(I, J, D2, D1)).astype(dtype)
    return CapsLayerParams(Tensor(W, requires_grad=True, name="caps.W"), r)


@dataclass
class RoutingState:
    b: Tensor  # final logits [N, I, J]
    c: Tensor  # final coupling coefficients [N, I, J]
    v: Tensor  # output poses [N, J, D2]
    couplings: list[Tensor] = field(default_factory=list)  # c at every iteration


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ConfigError("margins must satisfy 0 < m_minus < m_plus < 1")
        if self.lambda_down <= 0:
            raise ConfigError("lambda_down must be positive")


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Rescale ``s`` to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    norm = C.vector_norm(s, axis=axis, keepdims=True)
    sq = C.square(norm)
    return s * (sq / ((1.0 + sq) * norm))


def compute_votes(u: Tensor, params: CapsLayerParams) -> Tensor:
    """votes[n, i, j] = W[i, j] @ u[n, i]  ->  [N, I, J, D2]."""
    if u.ndim != 3 or u.shape[1:] != (params.I, params.D1):
        raise ShapeError(f"poses {u.shape} do not match capsule layer (I={params.I}, D1={params.D1})")
    n = u.shape[0]
    votes = C.matmul(params.W, C.reshape(u, (n, params.I, 1, params.D1, 1)))
    return C.reshape(votes, (n, params.I, params.J, params.D2))


def route(votes: Tensor, r: int) -> RoutingState:
    """Dynamic routing, unrolled so gradients flow through every iteration.

    Logits start at zero; the agreement update is skipped after the last
    iteration since its result would be unused.
    """
    if r < 1:
        raise ConfigError(f"routing iterations must be >= 1, got {r}")
    if votes.ndim != 4:
        raise ShapeError(f"votes must be [N, I, J, D2], got {votes.shape}")
    n, i, j, d2 = votes.shape
    b = Tensor(np.zeros((n, i, j), dtype=votes.dtype))
    couplings = []
    for it in range(r):
        c = C.softmax(b, axis=2)
        couplings.append(c)
        s = C.tsum(C.reshape(c, (n, i, j, 1)) * votes, axis=1)
        v = squash(s)
        if it < r - 1:
            agreement = C.tsum(votes * C.reshape(v, (n, 1, j, d2)), axis=3)
            b = b + agreement
    return RoutingState(b=b, c=c, v=v, couplings=couplings)


def _check_labels(labels: np.ndarray, n: int, j: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= j):
        raise InputError(f"labels must lie in [0, {j})")
    return labels.astype(np.int64)


def margin_loss(v: Tensor, labels, cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    """Batch mean of the per-sample sum over classes of the capsule margin loss."""
    n, j = v.shape[0], v.shape[1]
    labels = _check_labels(labels, n, j)
    present = np.zeros((n, j), dtype=v.dtype)
    present[np.arange(n), labels] = 1
    norms = C.vector_norm(v, axis=-1)
    up = C.square(C.relu(cfg.m_plus - norms))
    down = C.square(C.relu(norms - cfg.m_minus))
    per_class = present * up + (cfg.lambda_down * (1 - present)) * down
    return C.tsum(per_class) * (1.0 / n)


def capsule_norms(v) -> np.ndarray:
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    return np.sqrt(np.sum(data.astype(np.float64) ** 2, axis=-1))


def classify(v) -> np.ndarray:
    """Index of the longest output capsule; ties go to the lowest index."""
    return np.argmax(capsule_norms(v), axis=1)
