"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient.  Outside a tape every operation is a plain numpy
computation, which is how inference and stop-gradient paths are expressed.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    """Innermost tape active on the calling thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    out_id: int  # id() of the output; holding the tensor itself would form a cycle
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-owner: it belongs to the thread that entered it and is
    consumed by one call to :meth:`backward`.

    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        out._node = Node(id(out), tuple(inputs), backward)
        out._tape = self
        self.nodes.append(out._node)

    def backward(self, root: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        """Propagate d(root)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if self._consumed:
            raise ContractError("backward() may be called only once per tape")
        self._consumed = True
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != root.data.shape:
            raise ContractError(f"seed gradient shape {seed.shape} != output shape {root.shape}")
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(root): seed}
        tensors: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = inp
        for key, g in grads.items():
            t = tensors[key]
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()  # release the saved activations


class Tensor:
    """N-dimensional float64 array that can participate in a tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal constructor: no copy, finiteness still enforced.
        t = cls.__new__(cls)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"operation produced non-finite values (shape {arr.shape})")
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        return t

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in functional) -------------------------
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __rtruediv__(self, other):
        return F.div(other, self)

    def __neg__(self):
        return F.neg(self)

    def __pow__(self, p: float):
        return F.power(self, p)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, idx):
        return F.getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return F.max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return F.swapaxes(self, -1, -2)

    def exp(self):
        return F.exp(self)

    def log(self):
        return F.log(self)

    def abs(self):
        return F.abs(self)

    def relu(self):
        return F.relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result and record it when a tape is listening."""
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


from . import functional as F  # noqa: E402  (circular: functional imports Tensor)
