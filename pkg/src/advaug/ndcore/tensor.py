"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op that involves a grad-requiring input
records its parents and a backward closure on the output tensor. Calling
``backward()`` on a scalar walks the graph once in reverse topological
order and accumulates gradients additively into every participating
tensor. A graph is consumed by exactly one backward pass.

All arithmetic is double precision and single-threaded apart from BLAS
calls inside ``matmul``; reduction orders are fixed, so results are
bit-reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphConsumedError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add_bias",
    "concatenate",
    "cross_entropy",
    "elementwise",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "softmax",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 ndarray plus optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, arr: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += arr

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward pass ----------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every grad-requiring tensor reachable from here.

        Only valid on scalar outputs of a live graph; the traversed graph is
        marked consumed and its closures are released afterwards.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphConsumedError("tensor does not require grad; nothing to backpropagate")
        if self._consumed:
            raise GraphConsumedError("this graph was already consumed by a backward pass")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            if node._consumed:
                raise GraphConsumedError("part of this graph was already consumed by a backward pass")

        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            fn = node._backward
            if fn is not None:
                fn(node.grad)
                node._consumed = True
                node._parents = ()
                node._backward = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _as_operands(a, b):
    """Coerce (a, b) for a binary op: Tensor/Tensor same shape or Tensor/scalar."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
        return a, b
    if a_t:
        return a, float(b)
    if b_t:
        return float(a), b
    raise TypeError("at least one operand must be a Tensor")


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return Tensor._node(a.data + b.data, (a, b), bw)
    t, s = (a, b) if isinstance(a, Tensor) else (b, a)

    def bw(g, t=t):
        t._accumulate(g)
    return Tensor._node(t.data + s, (t,), bw)


def sub(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)
        return Tensor._node(a.data - b.data, (a, b), bw)
    if isinstance(a, Tensor):
        def bw(g, a=a):
            a._accumulate(g)
        return Tensor._node(a.data - b, (a,), bw)

    def bw(g, b=b):
        b._accumulate(-g)
    return Tensor._node(a - b.data, (b,), bw)


def mul(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        return Tensor._node(a.data * b.data, (a, b), bw)
    t, s = (a, b) if isinstance(a, Tensor) else (b, a)

    def bw(g, t=t, s=s):
        t._accumulate(g * s)
    return Tensor._node(t.data * s, (t,), bw)


def div(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(a, Tensor) and isinstance(b, Tensor):
            def bw(g, a=a, b=b):
                with np.errstate(divide="ignore", invalid="ignore"):
                    if a.requires_grad:
                        a._accumulate(g / b.data)
                    if b.requires_grad:
                        b._accumulate(-g * a.data / (b.data * b.data))
            return Tensor._node(a.data / b.data, (a, b), bw)
        if isinstance(a, Tensor):
            def bw(g, a=a, b=b):
                a._accumulate(g / b)
            return Tensor._node(a.data / b, (a,), bw)

        def bw(g, a=a, b=b):
            with np.errstate(divide="ignore", invalid="ignore"):
                b._accumulate(-g * a / (b.data * b.data))
        return Tensor._node(a / b.data, (b,), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, a=a):
        a._accumulate(-g)
    return Tensor._node(-a.data, (a,), bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b) -> Tensor:
    """Dispatch add/sub/mul/div by name; shapes must match or one side is scalar."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# -- unary functions -------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g, a=a, mask=mask):
        a._accumulate(g * mask)
    return Tensor._node(np.where(mask, a.data, 0.0), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g, a=a, y=y):
        a._accumulate(g * (1.0 - y * y))
    return Tensor._node(y, (a,), bw)


def sin(a: Tensor) -> Tensor:
    def bw(g, a=a):
        a._accumulate(g * np.cos(a.data))
    return Tensor._node(np.sin(a.data), (a,), bw)


def cos(a: Tensor) -> Tensor:
    def bw(g, a=a):
        a._accumulate(-g * np.sin(a.data))
    return Tensor._node(np.cos(a.data), (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)

    def bw(g, a=a):
        with np.errstate(divide="ignore", invalid="ignore"):
            a._accumulate(g / a.data)
    return Tensor._node(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g, a=a, y=y):
        a._accumulate(g * y)
    return Tensor._node(y, (a,), bw)


def xlogx(a: Tensor) -> Tensor:
    """x*log(x) with the 0*log(0) == 0 convention (entropy-style terms)."""
    pos = a.data > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(pos, a.data * np.log(np.where(pos, a.data, 1.0)), 0.0)

    def bw(g, a=a, pos=pos):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(pos, np.log(np.where(pos, a.data, 1.0)) + 1.0, 0.0)
        a._accumulate(g * d)
    return Tensor._node(y, (a,), bw)


# -- matmul, bias ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return Tensor._node(a.data @ b.data, (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes of x (b matches the last axis)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match last axis of {x.shape}")

    def bw(g, x=x, b=b):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            axes = tuple(range(g.ndim - 1))
            b._accumulate(g.sum(axis=axes))
    return Tensor._node(x.data + b.data, (x, b), bw)


# -- reductions and shape ops ----------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))
    return Tensor._node(y, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g, a=a, axis=axis, keepdims=keepdims, n=float(n)):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / n)
    return Tensor._node(y, (a,), bw)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bw(g, a=a):
        a._accumulate(g.reshape(a.shape))
    return Tensor._node(a.data.reshape(shape), (a,), bw)


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concatenate needs at least one tensor")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, ts=ts, offsets=offsets, axis=axis):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    return Tensor._node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# -- classifier-head ops ----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rejects non-finite inputs."""
    if not np.isfinite(a.data).all():
        raise NonFiniteError("softmax input contains non-finite values")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, a=a, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * y)
    return Tensor._node(y, (a,), bw)


def _log_softmax_np(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Forward-only stable log-softmax on raw arrays (no graph)."""
    z = a - a.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``logits`` is (B, C); ``labels`` is a length-B integer vector with values
    in [0, C).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    b, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("cross_entropy input contains non-finite values")

    logp = log_softmax(logits.data, axis=-1)
    loss = -logp[np.arange(b), labels].mean()

    def bw(g, logits=logits, logp=logp, labels=labels, b=b):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate(g * p / b)
    return Tensor._node(np.float64(loss), (logits,), bw)
