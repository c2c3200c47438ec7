"""Dense tensors and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


class Tensor:
    """An n-dimensional floating-point array with an optional gradient slot.

    ``data`` is a numpy array and is treated as immutable once the tensor
    exists; primitives always allocate fresh outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return ops.mul(self, 1.0 / other)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    """One executed primitive: its output, inputs and vector-Jacobian rule."""

    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitives executed while the tape is active.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar loss.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(loss, self)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a primitive's result, registering it on the active tape if needed."""
    check_finite(out_data, op)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors with ``requires_grad`` get their gradient accumulated into
    ``.grad``. Returns the gradient map keyed by ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads
