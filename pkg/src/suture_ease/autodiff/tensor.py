"""Dense tensor type and the recording tape used for reverse-mode autodiff.

Operations executed inside an active :class:`Tape` whose result depends on a
``requires_grad`` tensor are appended to the tape in execution order, so the
node list is already topologically sorted. ``Tape.backward`` walks it once in
reverse and then releases every saved activation; a second call is an error.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, TapeError

_DTYPES = (np.float32, np.float64)
# model tensors are rank <= 5; pooled-window and relative-position intermediates need 8
MAX_RANK = 8
_state = threading.local()

# finiteness checks after every forward op; tests switch this on
DEBUG_FINITE = bool(os.environ.get("SUTURE_EASE_DEBUG"))


def set_debug(enabled: bool) -> None:
    global DEBUG_FINITE
    DEBUG_FINITE = bool(enabled)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None and arr.dtype not in _DTYPES:
        dtype = np.float32
    # ascontiguousarray would promote 0-d arrays to 1-d
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """N-dimensional f32/f64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_producer")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        if self.data.ndim > MAX_RANK:
            raise ContractError(f"tensors are limited to rank {MAX_RANK}, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._producer: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar, implemented in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis, keepdims)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops run while it is active are recorded::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        node.output._producer = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward already called on this tape; run the forward pass again")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
        produced = {id(n.output) for n in self.nodes}
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            entry = grads.pop(id(node.output), None)
            vjp, node.vjp = node.vjp, None
            if entry is None:
                continue
            if vjp is None:
                raise TapeError(f"node {index} ({node.op}) has no saved state")
            in_grads = vjp(entry[1])
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise TapeError(
                        f"{node.op} produced gradient of shape {g.shape} for input of shape {inp.shape}"
                    )
                slot = grads.get(id(inp))
                if slot is None:
                    grads[id(inp)] = [inp, np.array(g, dtype=inp.dtype, copy=True)]
                else:
                    slot[1] += g
        for key, (tensor, g) in grads.items():
            if key in produced:
                raise TapeError(f"dangling gradient for an intermediate tensor of shape {tensor.shape}")
            if tensor.grad is None:
                tensor.grad = g
            else:
                tensor.grad = tensor.grad + g
        self.nodes = []


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def apply_op(op: str, inputs: Sequence, out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap a forward result and record ``vjp`` on the active tape if needed.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    """
    if DEBUG_FINITE and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs if isinstance(t, Tensor)):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    requires = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(Node(op, tuple(inputs), result, vjp))
    return result
