"""Tensor node, parameter registry, and the reverse-mode tape.

The engine is eager: each op computes its value immediately and records a
backward closure on the result node.  ``backward`` walks the recorded graph
in reverse topological order.  Nodes whose inputs all have
``requires_grad=False`` record nothing, so frozen subgraphs cost no memory
and can never receive updates.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError):
    """Raised when an op rejects its operand shapes; names the op."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select 32- or 64-bit precision for subsequently created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DiffcoreError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None, op="leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, not 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, op={self.op})"

    # operator sugar; the real implementations live in ops.py
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

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def tensor(data, dtype=None, requires_grad=False) -> Tensor:
    """Create a leaf tensor from external data.

    Float arrays keep their precision; everything else converts to the
    default dtype.  Non-finite values are a hard error here; computed nodes
    are not re-checked (training loops watch the loss instead).
    """
    if dtype is not None:
        arr = np.asarray(data, dtype=dtype)
    else:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise DiffcoreError("tensor: non-finite values in input data")
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=False)


def parameter(data, dtype=None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=True)


def make_node(data, parents, bwd, op) -> Tensor:
    """Internal constructor used by ops; prunes dead branches."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _bwd=bwd, op=op)
    return Tensor(data, requires_grad=False, op=op)


def evaluate(root: Tensor) -> np.ndarray:
    """Forward value of a graph root (already computed eagerly)."""
    return root.data


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Reverse-mode gradients of a scalar loss.

    Returns a dict name -> gradient array when ``params`` is a ParamSet
    (unreachable parameters get exact zeros), or a list of arrays when
    ``params`` is a list of tensors, or None.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node.grad is None or node._bwd is None:
                continue
            node._bwd(node.grad)
    if params is None:
        return None
    if isinstance(params, ParamSet):
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()
        }
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in params]


def accumulate(node: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution onto a node (used by op closures).

    The array is adopted without copying; nothing in the engine mutates
    gradients in place, so aliasing a closure's buffer is safe.
    """
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        node.grad = node.grad + g


class ParamSet:
    """Named parameter tensors with stable order and per-entry trainable flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, data, trainable=True, dtype=None) -> Tensor:
        if name in self._params:
            raise DiffcoreError(f"ParamSet: duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else tensor(data, dtype=dtype)
        t.requires_grad = trainable
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def adopt(self, other: "ParamSet", prefix: str = "") -> None:
        for name, t in other.items():
            self.add(prefix + name, t, trainable=other.trainable(name))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def replace(self, name: str, t: Tensor) -> Tensor:
        """Swap in a different tensor object (gradient-check plumbing)."""
        old = self._params[name]
        self._params[name] = t
        return old

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def freeze_all(self) -> None:
        for name in self._params:
            self.set_trainable(name, False)

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def checksums(self) -> dict[str, str]:
        """sha256 of each parameter's raw bytes (freeze verification)."""
        out = {}
        for name, t in self._params.items():
            out[name] = hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}
