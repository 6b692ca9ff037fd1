"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations build a graph of :class:`Node` objects as they run. Each node
gets a monotonically increasing id at creation, so sorting the nodes reachable
from a loss by descending id is a valid reverse topological order. A
:class:`Tape` can be opened to observe the nodes recorded in a region of code.

Broadcasting is limited to two cases: a scalar (shape ``()``) against any
tensor, and a bias row of shape ``(n,)`` added to an ``(m, n)`` matrix.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from laurel import _kernels

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "OpCount",
    "ShapeError",
    "GradientError",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "transpose",
    "add",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "softmax_lastaxis",
    "cross_entropy",
    "tsum",
    "stack",
    "take",
    "backward",
    "finite_diff_grad",
    "count_ops",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised when backward cannot run or a gradient check sees bad values."""


_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


@dataclass(eq=False)
class Node:
    """One recorded operation: its kind, inputs and a vector-Jacobian closure."""

    op: str
    parents: tuple
    vjp: Callable[[np.ndarray], tuple]
    id: int = field(default_factory=lambda: next(_ids))


class Tape:
    """Append-only record of the nodes created while the tape is active.

    Usage::

        with Tape() as tape:
            loss = cross_entropy(model(x), y)
        assert all(p.node.id < n.id for n in tape.nodes for p in n.parents if p.node)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class OpCount:
    """Multiply-add tally collected by :func:`count_ops`."""

    mult_adds: int = 0


@contextmanager
def count_ops() -> Iterator[OpCount]:
    """Count the multiply-adds performed by forward ops in this thread.

    A matmul of ``m x k`` by ``k x n`` contributes ``m*k*n``; an elementwise
    addition contributes one per output element.
    """
    counter = OpCount()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _tally(n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.mult_adds += n


class Tensor:
    """A float64 array plus an optional link into the autodiff graph.

    Leaves are created directly with ``requires_grad=True``; interior tensors
    carry the :class:`Node` that produced them.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    node = Node(op, tuple(parents), vjp)
    for tape in _tape_stack():
        tape.nodes.append(node)
    return Tensor(data, requires_grad=True, node=node)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``m x k`` and ``k x n`` tensors, inner index ascending."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    _tally(ad.shape[0] * ad.shape[1] * bd.shape[1])
    out = _kernels.matmul(ad, bd)

    def vjp(g):
        return (
            _kernels.matmul(g, np.ascontiguousarray(bd.T)) if a.requires_grad else None,
            _kernels.matmul(np.ascontiguousarray(ad.T), g) if b.requires_grad else None,
        )

    return _make(out, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T.copy(),))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(_kernels.sum_all(g))
    # bias row
    return _kernels.sum_rows(g)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a scalar or a bias row for ``a``."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == () and b.shape != ():
        return add(b, a)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    _tally(out.size)
    sb = b.shape
    return _make(out, "add", (a, b), lambda g: (g, _reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a scalar tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == () and b.shape != ():
        return mul(b, a)
    if not (a.shape == b.shape or b.shape == ()):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd
    _tally(out.size)
    sb = b.shape

    def vjp(g):
        return g * bd, _reduce_to(g * ad, sb)

    return _make(out, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a constant (non-learned) scalar."""
    s = float(s)
    _tally(a.size)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x2 = x.reshape(-1, x.shape[-1])
    e = np.exp(x2 - x2.max(axis=1, keepdims=True))
    return (e / _kernels.sum_last(e)[:, None]).reshape(x.shape)


def softmax_lastaxis(a: Tensor) -> Tensor:
    """Softmax over the last axis of a vector or matrix."""
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"softmax_lastaxis: expected 1-D or 2-D input, got {a.shape}")
    p = _softmax_rows(a.data)

    def vjp(g):
        g2, p2 = g.reshape(-1, p.shape[-1]), p.reshape(-1, p.shape[-1])
        inner = _kernels.sum_last(g2 * p2)[:, None]
        return ((p2 * (g2 - inner)).reshape(p.shape),)

    return _make(p, "softmax", (a,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes, via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be b x c, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    x = logits.data
    m = x.max(axis=1)
    lse = m + np.log(_kernels.sum_last(np.exp(x - m[:, None])))
    rows = np.arange(b)
    loss = _kernels.sum_all(lse - x[rows, labels]) / b

    def vjp(g):
        p = _softmax_rows(x)
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), vjp)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = a.shape
    return _make(np.asarray(_kernels.sum_all(a.data)), "sum", (a,),
                 lambda g: (np.full(shape, float(g)),))


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a vector."""
    for s in scalars:
        if s.shape != ():
            raise ShapeError(f"stack: expected scalars, got shape {s.shape}")
    out = np.array([s.data for s in scalars], dtype=np.float64)
    return _make(out, "stack", tuple(scalars), lambda g: tuple(np.asarray(v) for v in g))


def take(a: Tensor, i: int) -> Tensor:
    """Element ``i`` of a vector, as a scalar tensor."""
    if a.data.ndim != 1:
        raise ShapeError(f"take: expected a vector, got shape {a.shape}")
    n = a.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return _make(np.asarray(a.data[i]), "take", (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass and oracle
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every grad-enabled leaf.

    Returns a map from leaf tensor to its gradient array and also stores each
    gradient on ``leaf.grad`` (overwriting any previous value).
    """
    if loss.shape != ():
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward: loss is detached from every grad-enabled tensor")
    if loss.node is None:
        loss.grad = np.asarray(1.0)
        return {loss: loss.grad}

    nodes: dict[int, Node] = {}
    todo = [loss.node]
    while todo:
        n = todo.pop()
        if n.id in nodes:
            continue
        nodes[n.id] = n
        todo.extend(p.node for p in n.parents if p.node is not None)

    # interior nodes are keyed by node id, leaves by ("leaf", id(tensor))
    grads: dict = {loss.node.id: np.asarray(1.0)}
    leaves: dict = {}
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        for parent, pg in zip(n.parents, n.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                key = ("leaf", id(parent))
                leaves[key] = parent
            else:
                key = parent.node.id
            grads[key] = grads[key] + pg if key in grads else pg

    out = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key]).reshape(leaf.shape)
        out[leaf] = leaf.grad
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Only the coordinates in ``indices`` are evaluated when given; the rest of
    the returned vector is zero.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size) if indices is None else indices:
        old = p[i]
        p[i] = old + h
        fp = float(f(p))
        p[i] = old - h
        fm = float(f(p))
        p[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad
