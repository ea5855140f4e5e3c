"""Tensor type and the reverse-mode tape.

Every differentiable op produces a new :class:`Tensor` and, when any input
requires a gradient, records a :class:`Node` carrying a monotonically
increasing sequence number.  Sequence numbers give the tape its
topological order: a node's inputs were always created before it.
``backward`` walks the reachable nodes in decreasing sequence order and
accumulates gradients additively, so a tensor used twice receives the sum
of both contributions.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

_state = threading.local()
_seq = itertools.count()


def _get(name: str, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def check_finite_enabled() -> bool:
    return _get("finite", True)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterable[None]:
    prev = check_finite_enabled()
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "inputs", "backward", "out_id", "op")

    def __init__(self, inputs: Sequence["Tensor"], backward: Callable, out_id: int, op: str):
        self.seq = next(_seq)
        self.inputs = tuple(inputs)
        self.backward = backward
        self.out_id = out_id
        self.op = op


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar; implementations live in ops ---------------------
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
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that requires grad, cast to the current default dtype."""
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    return Tensor(arr)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output and record it on the tape when needed."""
    if check_finite_enabled() and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward, id(out), op)
    return out


def _reachable(root: Tensor) -> list[tuple[Node, Tensor | None]]:
    nodes: dict[int, Node] = {}
    stack = [root]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.seq] = t.node
            stack.extend(i for i in t.node.inputs if i.requires_grad)
    return [nodes[k] for k in sorted(nodes, reverse=True)]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient buffer so callers can rely on ``.grad`` being populated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
