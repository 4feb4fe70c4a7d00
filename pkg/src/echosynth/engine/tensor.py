"""Tensor and tape for reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient.  Outside any tape, ops simply compute
values (equivalent to a no-grad region).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Float32 array with an optional gradient and a handle into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar, defined in ops to avoid a circular import
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


class _Node:
    __slots__ = ("output", "parents", "backward")

    def __init__(self, output: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.output = output
        self.parents = tuple(parents)
        self.backward = backward


class Tape:
    """Append-only record of operations, consumed by a single backward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def record(self, output: Tensor, parents: Sequence[Tensor], backward: Callable) -> int:
        if self._consumed:
            raise RuntimeError("cannot record on a tape that has already been backpropagated")
        node_id = len(self.nodes)
        self.nodes.append(_Node(output, parents, backward))
        output.node_id = node_id
        output._tape = self
        return node_id

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape; re-record the computation")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, gp in zip(node.parents, grads):
                if gp is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(gp, dtype=np.float32, copy=True).reshape(parent.shape)
                else:
                    parent.grad += gp
        # intermediate results keep their grads for inspection; leaves keep theirs for the optimizer


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap op output, recording it on the active tape if any parent needs a gradient."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(out, parents, backward)
        else:
            out.requires_grad = False
    return out
