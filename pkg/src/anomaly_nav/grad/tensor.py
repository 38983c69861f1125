"""Tape-free reverse-mode differentiation over numpy arrays.

Every op returns a ``Tensor`` that remembers its parents and a closure that
pushes the output gradient back to them.  ``backward`` replays closures in
descending creation order, which is a reverse topological order because a
node is always created after its inputs.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericError, UsageError

_ids = itertools.count()
_state = {"grad": True, "debug": False, "dtype": np.dtype(np.float32)}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference on frozen parameters)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are cast to.

    Only finite-difference oracles use float64; everything else runs float32.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_debug(flag: bool) -> None:
    """When on, every op asserts its output is finite."""
    _state["debug"] = bool(flag)


def grad_enabled() -> bool:
    return _state["grad"]


def default_dtype() -> np.dtype:
    return _state["dtype"]


class Tensor:
    """A value node: data, accumulated gradient and provenance."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the functions live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __getitem__(self, idx):
        from . import ops

        return ops.getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward, opname: str) -> Tensor:
    """Wrap an op result, recording provenance only when someone needs it."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {opname}")
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, name=opname, _parents=parents, _backward=backward)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Gradients add into existing ``.grad`` buffers; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen.add(n._id)
        nodes.append(n)
        stack.extend(p for p in n._parents if p.requires_grad and p._id not in seen)
    nodes.sort(key=lambda n: n._id, reverse=True)
    loss._accumulate(np.ones_like(loss.data))
    for n in nodes:
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)
            # interior buffers are not needed after their push
            n.grad = None
