"""Define-by-run reverse-mode autodiff on top of numpy arrays.

Every differentiable operator is an :class:`Op` subclass registered under a
string id. ``apply_op`` runs the forward pass and, when any input requires a
gradient, records a node on the output tensor. ``backward`` walks those nodes
in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from useg.errors import NoGraph, NonFinite, NotScalar

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "ctx")

    def __init__(self, op: "Op", inputs: Tuple["Tensor", ...], ctx: dict):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx


class Tensor:
    """A shaped real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every method routes through apply_op
    def _wrap(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return apply_op("add", [self, self._wrap(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_op("sub", [self, self._wrap(other)])

    def __rsub__(self, other):
        return apply_op("sub", [self._wrap(other), self])

    def __mul__(self, other):
        return apply_op("mul", [self, self._wrap(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_op("div", [self, self._wrap(other)])

    def __neg__(self):
        return apply_op("mul", [self, Tensor(np.asarray(-1.0, dtype=self.dtype))])

    def __matmul__(self, other):
        return apply_op("matmul", [self, self._wrap(other)])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_op("transpose", [self], {"axes": tuple(axes)})

    def sum(self, axis=None, keepdims=False):
        return apply_op("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return apply_op("mean", [self], {"axis": axis, "keepdims": keepdims})


class Op:
    """Base operator. Subclasses implement ``forward`` and ``backward``.

    ``forward(ctx, *arrays, **attrs)`` returns the output array and may stash
    whatever ``backward(ctx, grad)`` needs in ``ctx``. ``backward`` returns one
    gradient array (or None) per input.
    """

    name: str = ""
    n_inputs: Optional[int] = None  # None means variadic

    def check(self, shapes: List[Tuple[int, ...]], attrs: dict) -> None:
        pass

    def forward(self, ctx: dict, *xs: np.ndarray, **attrs):
        raise NotImplementedError

    def backward(self, ctx: dict, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


OPS: Dict[str, Op] = {}


def register(cls):
    """Class decorator adding an operator instance to the registry."""
    OPS[cls.name] = cls()
    return cls


def apply_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    from useg.errors import InvalidAttr

    try:
        op = OPS[kind]
    except KeyError:
        raise InvalidAttr(f"unknown operator {kind!r}") from None
    attrs = dict(attrs or {})
    inputs = tuple(inputs)
    if op.n_inputs is not None and len(inputs) != op.n_inputs:
        raise InvalidAttr(f"{kind} expects {op.n_inputs} inputs, got {len(inputs)}")
    op.check([t.shape for t in inputs], attrs)
    ctx: dict = {}
    out = op.forward(ctx, *[t.data for t in inputs], **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{kind} produced a non-finite value")
    res = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res.node = Node(op, inputs, ctx)
    return res


def _toposort(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(output: Tensor, retain_graph: bool = False) -> Dict[str, np.ndarray]:
    """Accumulate d(output)/d(leaf) into every requires_grad leaf.

    Returns a map from leaf name to its accumulated gradient for named leaves.
    The graph is released afterwards unless ``retain_graph`` is set.
    """
    if output.size != 1 or output.ndim > 1:
        raise NotScalar(f"backward needs a scalar output, got shape {output.shape}")
    if output.node is None:
        raise NoGraph("output is not the result of a recorded computation (detached, or graph already released)")

    order = _toposort(output)
    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: List[Tensor] = []
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if not np.all(np.isfinite(g)):
                raise NonFinite(f"non-finite gradient reached leaf {t.name or t!r}")
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaves.append(t)
            continue
        node = t.node
        in_grads = node.op.backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{node.op.name}: grad shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            t.node = None
    return {leaf.name: leaf.grad for leaf in leaves if leaf.name is not None}


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, requires_grad=False, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


