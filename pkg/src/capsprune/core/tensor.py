"""Tensor value type and the gradient tape.

A :class:`Tape` records primitive operations while it is active on the
current thread. Tapes are single-use: one forward pass, one backward pass.
Each thread has its own active-tape stack, so independent forward/backward
cycles may run concurrently as long as each owns its tape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError, ShapeError, StaleTapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


def check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in {what} (shape {tuple(data.shape)})")


class Tensor:
    """Dense float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    # Make numpy defer to our reflected operators (ndarray * Tensor -> Tensor).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape) and arr.size != 0:
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # Skips validation; callers have already checked finiteness.
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of primitive operations for one forward/backward cycle."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._entered = False
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._entered:
            raise StaleTapeError("tapes are not reentrant")
        if self._consumed:
            raise StaleTapeError("tape already consumed by a backward pass")
        self._entered = True
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            raise ContractError("tape exited out of order")

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise StaleTapeError("cannot record onto a consumed tape")
        out._tape = self
        self._records.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StaleTapeError("backward already ran on this tape; record a new forward pass")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._tape is not self:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads.pop(key)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self._records.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not on any tape (was it computed inside `with Tape():`?)")
    tape.backward(loss)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, what: str) -> Tensor:
    """Wrap a primitive's result and record it on the active tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per parent.
    """
    check_finite(data, what)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        tape.record(out, tuple(parents), backward_fn)
    return out
