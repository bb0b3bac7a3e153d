"""Dense tensors and a reverse-mode differentiation tape.

Operations record themselves on the active :class:`Tape` (if any). Outside a
``with Tape():`` block nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Raised for invalid layer or network configuration."""


class ContractError(RuntimeError):
    """Raised when an engine-level precondition is violated."""


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar used by the network code
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self):
        from . import ops

        return ops.sum_all(self)


@dataclass
class Node:
    """One executed operation: inputs, output and the rule mapping the output
    gradient to input gradients (one array, or None, per input)."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
        return backward(self, loss, params)


def active_tape() -> Tape | None:
    return _active_tape.get()


def needs_grad(*tensors: Tensor) -> bool:
    return _active_tape.get() is not None and any(t.requires_grad for t in tensors)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and, when any input needs gradients and a
    tape is active, append the operation to that tape."""
    tape = _active_tape.get()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(tuple(inputs), out, grad_fn, op))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape`` in exact reverse execution order.

    Gradients accumulate into ``.grad`` of every tensor that requires them. If
    ``params`` is given, their gradients are returned in order, zeros for those
    the loss does not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves: whatever remains was never produced on this tape
    seen: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            seen[id(inp)] = inp
    seen[id(loss)] = loss
    for key, g in grads.items():
        t = seen.get(key)
        if t is not None:
            t.accumulate(g)
    if params is None:
        return []
    # gradients from this pass only, independent of what .grad has accumulated
    return [np.array(grads[id(p)], dtype=p.dtype) if id(p) in grads else np.zeros_like(p.data) for p in params]
