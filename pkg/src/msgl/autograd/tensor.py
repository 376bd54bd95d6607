"""Dense float64 tensor with a reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from msgl.errors import NonFiniteError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True
# op name -> multiplicative corruption applied to that op's input gradients
_backward_faults: dict[str, float] = {}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale every gradient produced by the backward rule of ``op``.

    Test-harness hook used to prove the gradient checker notices a broken rule.
    """
    _backward_faults[op] = factor
    try:
        yield
    finally:
        _backward_faults.pop(op, None)


class Tensor:
    """A shape-tagged float64 array that can take part in a recorded computation.

    Leaves are created directly; every other tensor is produced by an op in
    :mod:`msgl.autograd.functional`, which records how to push a gradient back
    to its inputs. ``backward`` walks that record once and then discards it.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operators delegate to the functional module (imported lazily to avoid a cycle)
    def __add__(self, other):
        from msgl.autograd import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from msgl.autograd import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from msgl.autograd import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from msgl.autograd import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from msgl.autograd import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from msgl.autograd import functional as F
        return F.div(other, self)

    def __neg__(self):
        from msgl.autograd import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from msgl.autograd import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from msgl.autograd import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from msgl.autograd import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from msgl.autograd import functional as F
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from msgl.autograd import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from msgl.autograd import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Populate ``grad`` on every tensor upstream of this scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node))
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            factor = _backward_faults.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            # the tape is single-use
            node._parents = ()
            node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output, recording the backward rule when any input needs grad."""
    if not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"op '{op}' produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
