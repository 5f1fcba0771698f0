"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op records a node holding its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` orders the reachable nodes
topologically and visits each exactly once in reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradCheckReport",
    "as_tensor",
    "backward",
    "concat",
    "constant",
    "cosine_similarity",
    "dot",
    "grad_check",
    "hinge",
    "l2_normalize",
    "logsumexp",
    "no_grad",
    "stack",
    "take",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _record(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return _record(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        a = self.data
        return _record(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow"
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim == 0 or b.ndim == 0:
            raise ValueError("matmul does not accept scalars")
        if a.ndim == 1:
            return (self.reshape(1, -1) @ other).reshape(*b.shape[:-2], b.shape[-1])
        if b.ndim == 1:
            return (self @ other.reshape(-1, 1)).reshape(*a.shape[:-1])
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def grad_fn(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _record(a @ b, (self, other), grad_fn, "matmul")

    def __getitem__(self, index):
        shape = self.shape
        fancy = _is_fancy(index)

        def grad_fn(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return _record(self.data[index], (self,), grad_fn, "getitem")

    # -- elementwise ---------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return _record(out, (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _record(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _record(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return _record(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _record(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        """Max-pool over one axis; the gradient goes to the first maximal index."""
        a = self.data
        axis = axis % a.ndim
        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        out = np.take_along_axis(a, idx, axis=axis)

        def grad_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros(a.shape)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return _record(out if keepdims else out.squeeze(axis), (self,), grad_fn, "max")

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        return logsumexp(self, axis=axis, keepdims=keepdims)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self.data
        shift = a.max(axis=axis, keepdims=True)
        lse = shift + np.log(np.exp(a - shift).sum(axis=axis, keepdims=True))
        out = a - lse

        def grad_fn(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return _record(out, (self,), grad_fn, "log_softmax")

    # -- shape ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return _record(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _record(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes"
        )

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record(
            np.broadcast_to(self.data, shape).copy(),
            (self,),
            lambda g: (_unbroadcast(g, old),),
            "expand",
        )

    def backward(self) -> "Graph":
        return backward(self)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by op '{op}' (shape {data.shape})")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out.op = op
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """A tensor that never receives gradient."""
    return Tensor(value)


# -- free-function ops --------------------------------------------------


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = x.data
    shift = a.max(axis=axis, keepdims=True)
    out = shift + np.log(np.exp(a - shift).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a - out),)

    return _record(out if keepdims else out.squeeze(axis), (x,), grad_fn, "logsumexp")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def grad_fn(g):
        return tuple(np.squeeze(part, axis=axis) for part in np.split(g, n, axis=axis))

    return _record(data, tuple(tensors), grad_fn, "stack")


def take(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range for table with {rows} rows")

    def grad_fn(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.data[ids], (table,), grad_fn, "take")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis, broadcasting leading axes."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dot dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return (a * b).sum(axis=-1)


def hinge(x: Tensor) -> Tensor:
    """max(0, x)."""
    return as_tensor(x).relu()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] != b.shape[axis]:
        raise ValueError("cosine similarity dimension mismatch")
    return (l2_normalize(a, axis) * l2_normalize(b, axis)).sum(axis=axis)


# -- backward -----------------------------------------------------------


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# -- finite-difference checking -----------------------------------------


@dataclass
class GradCheckReport:
    max_error: dict[str, float]
    failed: list[str]
    tol: float

    @property
    def ok(self) -> bool:
        return not self.failed

    def worst(self) -> tuple[str, float]:
        name = max(self.max_error, key=self.max_error.get)
        return name, self.max_error[name]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    abs_tol: float = 1e-8,
    small: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, element by element.

    Relative error is ``|a - n| / max(|a|, |n|)``; where the analytic gradient
    is below ``small`` in magnitude the absolute error is compared with
    ``abs_tol`` instead. Reported errors are normalised so that a value above
    ``tol`` means failure under either rule.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }

    max_error: dict[str, float] = {}
    failed: list[str] = []
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            worst = 0.0
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                a = analytic[name].reshape(-1)[k]
                if abs(a) < small:
                    err = abs(a - numeric) / abs_tol * tol
                else:
                    err = abs(a - numeric) / max(abs(a), abs(numeric))
                worst = max(worst, err)
            max_error[name] = worst
            if worst > tol:
                failed.append(name)
    return GradCheckReport(max_error, failed, tol)
