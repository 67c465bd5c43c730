"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the primitives the one-layer transformer needs are provided.  A
:class:`Graph` records every operation whose inputs require gradients, in
creation order, so the tape is topologically sorted by construction and
:func:`backward` walks it once in reverse.

    >>> g = Graph()
    >>> x = g.leaf(np.array([3.0]))
    >>> backward(sum_all(mul(x, x)))
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Graph",
    "Tensor",
    "constant",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "softmax",
    "log_softmax",
    "log_softmax_array",
    "sum_all",
    "mean_all",
    "embedding",
    "reshape",
    "transpose",
    "select",
    "take",
    "max_excluding",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


def _shape_error(op: str, *shapes) -> ShapeError:
    desc = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {desc}")


class Tensor:
    """A float64 array that may carry a gradient buffer.

    ``grad`` is ``None`` until a backward pass reaches the tensor, after
    which it has the same shape as ``values``.
    """

    __slots__ = ("values", "grad", "requires_grad", "graph", "op", "_backward")

    def __init__(self, values, graph: Optional["Graph"] = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.graph = graph
        self.op = op
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        # fresh=True hands over a newly allocated array, skipping the copy
        if self.grad is None:
            self.grad = g if fresh else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"


class Graph:
    """Ordered tape of recorded operations.

    A graph belongs to one execution context.  Build a fresh one per
    forward pass.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, values) -> Tensor:
        """Create a differentiable input tensor attached to this graph."""
        return Tensor(values, graph=self, requires_grad=True)

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop backward closures and the tape.

        Closures reference their parents, so a finished tape is a web of
        cycles that the garbage collector frees late; breaking it here
        returns the intermediate arrays immediately.
        """
        for node in self.nodes:
            node._backward = None
            node.graph = None
        self.nodes = []


def constant(values) -> Tensor:
    """A tensor that never receives a gradient."""
    return Tensor(values)


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    graph = None
    for p in parents:
        if p.requires_grad:
            graph = p.graph
            break
    if graph is None:
        return Tensor(values, op=op)
    for p in parents:
        if p.requires_grad and p.graph is not graph:
            raise ValueError(f"{op}: operands belong to different graphs")
    out = Tensor(values, graph=graph, requires_grad=True, op=op)
    out._backward = backward_fn(out)
    graph.nodes.append(out)
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor of ``root``'s graph.

    The root must be a scalar (size one).  Each recorded operation is
    visited exactly once, in reverse recording order.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not depend on any leaf")
    root.grad = np.ones_like(root.values)
    for node in reversed(root.graph.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward()


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``.

    ``b`` is either a 2-D weight ``(k, n)`` applied to the trailing axis of
    ``a`` of shape ``(..., m, k)`` or ``(..., k)``, or a batch ``(..., k, n)``
    with exactly the same leading dimensions as ``a``.
    """
    av, bv = a.values, b.values
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise _shape_error("matmul", av.shape, bv.shape)
    if bv.ndim > 2 and (av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2]):
        raise _shape_error("matmul", av.shape, bv.shape)
    weight = bv.ndim == 2
    if weight:
        # one 2-D GEMM is markedly faster than numpy's stacked path
        k, n = bv.shape
        out_v = (av.reshape(-1, k) @ bv).reshape(av.shape[:-1] + (n,))
    else:
        out_v = av @ bv

    def bw(out):
        def _bw():
            g = out.grad
            if weight:
                g2 = g.reshape(-1, n)
                if a.requires_grad:
                    a._accumulate((g2 @ bv.T).reshape(av.shape), fresh=True)
                if b.requires_grad:
                    b._accumulate(av.reshape(-1, k).T @ g2, fresh=True)
                return
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(bv, -1, -2), fresh=True)
            if b.requires_grad:
                b._accumulate(np.swapaxes(av, -1, -2) @ g, fresh=True)
        return _bw

    return _make(out_v, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing slice of ``a``'s shape."""
    av, bv = a.values, b.values
    if av.shape != bv.shape and (bv.ndim > av.ndim or av.shape[av.ndim - bv.ndim:] != bv.shape):
        raise _shape_error("add", av.shape, bv.shape)
    lead = tuple(range(av.ndim - bv.ndim))

    def bw(out):
        def _bw():
            g = out.grad
            # out.grad is dead after this call, so ``a`` may take it over
            if b.requires_grad:
                b._accumulate(g.sum(axis=lead), fresh=True) if lead else b._accumulate(g)
            if a.requires_grad:
                a._accumulate(g, fresh=True)
        return _bw

    return _make(av + bv, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)

    def bw(out):
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad, fresh=True)
        return _bw

    return _make(a.values - b.values, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.values, b.values

    def bw(out):
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad * bv, fresh=True)
            if b.requires_grad:
                b._accumulate(out.grad * av, fresh=True)
        return _bw

    return _make(av * bv, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(out):
        def _bw():
            a._accumulate(out.grad * c, fresh=True)
        return _bw

    return _make(a.values * c, "scale", (a,), bw)


# -- elementwise nonlinearities -----------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def bw(out):
        def _bw():
            a._accumulate(out.grad * mask, fresh=True)
        return _bw

    return _make(np.where(mask, a.values, 0.0), "relu", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(out):
        def _bw():
            a._accumulate(out.grad * s * (1.0 - s), fresh=True)
        return _bw

    return _make(s, "sigmoid", (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise ValueError("log: non-positive input")
    x = a.values

    def bw(out):
        def _bw():
            a._accumulate(out.grad / x, fresh=True)
        return _bw

    return _make(np.log(x), "log", (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.values
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def _bw():
            g = out.grad
            a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)), fresh=True)
        return _bw

    return _make(s, "softmax", (a,), bw)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-softmax of a plain array."""
    # log-sum-exp as log1p over the non-maximal terms: keeps log p of a
    # confident prediction accurate far below machine epsilon
    top = np.expand_dims(np.argmax(x, axis=axis), axis)
    shifted = x - np.take_along_axis(x, top, axis=axis)
    e = np.exp(shifted)
    np.put_along_axis(e, top, 0.0, axis=axis)
    return shifted - np.log1p(e.sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ls = log_softmax_array(a.values, axis)

    def bw(out):
        def _bw():
            g = out.grad
            a._accumulate(g - np.exp(ls) * g.sum(axis=axis, keepdims=True), fresh=True)
        return _bw

    return _make(ls, "log_softmax", (a,), bw)


# -- reductions ---------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bw(out):
        def _bw():
            a._accumulate(np.broadcast_to(out.grad, a.shape))
        return _bw

    return _make(np.asarray(a.values.sum()), "sum", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    n = a.size

    def bw(out):
        def _bw():
            a._accumulate(np.broadcast_to(out.grad / n, a.shape))
        return _bw

    return _make(np.asarray(a.values.mean()), "mean", (a,), bw)


# -- indexing and layout ------------------------------------------------------

def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D ``table`` gathered by integer array ``idx``."""
    idx = np.asarray(idx)
    if table.values.ndim != 2:
        raise _shape_error("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding: index out of range for table {table.shape}")

    def bw(out):
        def _bw():
            flat_idx = idx.reshape(-1)
            rows = out.grad.reshape(-1, table.shape[1])
            if table.shape[0] <= 4096:
                # scatter-add as a one-hot GEMM; much faster than ufunc.at
                onehot = np.zeros((flat_idx.size, table.shape[0]))
                onehot[np.arange(flat_idx.size), flat_idx] = 1.0
                g = onehot.T @ rows
            else:
                g = np.zeros_like(table.values)
                np.add.at(g, flat_idx, rows)
            table._accumulate(g, fresh=True)
        return _bw

    return _make(table.values[idx], "embedding", (table,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise _shape_error("reshape", a.shape, shape)

    def bw(out):
        def _bw():
            a._accumulate(out.grad.reshape(a.shape), fresh=True)
        return _bw

    return _make(a.values.reshape(shape), "reshape", (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))

    def bw(out):
        def _bw():
            a._accumulate(out.grad.transpose(inverse), fresh=True)
        return _bw

    return _make(a.values.transpose(axes), "transpose", (a,), bw)


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Drop ``axis`` by picking one position along it."""
    x = a.values
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise _shape_error("select", a.shape, (index,))

    def bw(out):
        def _bw():
            g = np.zeros_like(x)
            sl = [slice(None)] * x.ndim
            sl[axis] = index
            g[tuple(sl)] = out.grad
            a._accumulate(g, fresh=True)
        return _bw

    return _make(np.take(x, index, axis=axis), "select", (a,), bw)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row pick from a 2-D tensor: ``out[i] = a[i, idx[i]]``."""
    idx = np.asarray(idx)
    x = a.values
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise _shape_error("take", x.shape, idx.shape)
    rows = np.arange(x.shape[0])

    def bw(out):
        def _bw():
            g = np.zeros_like(x)
            g[rows, idx] = out.grad
            a._accumulate(g, fresh=True)
        return _bw

    return _make(x[rows, idx], "take", (a,), bw)


def max_excluding(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row maximum of a 2-D tensor over all columns except ``idx[i]``.

    The gradient is routed to the lowest-index maximiser.
    """
    idx = np.asarray(idx)
    x = a.values
    if x.ndim != 2 or idx.shape != (x.shape[0],) or x.shape[1] < 2:
        raise _shape_error("max_excluding", x.shape, idx.shape)
    rows = np.arange(x.shape[0])
    masked = x.copy()
    masked[rows, idx] = -np.inf
    arg = masked.argmax(axis=1)

    def bw(out):
        def _bw():
            g = np.zeros_like(x)
            g[rows, arg] = out.grad
            a._accumulate(g, fresh=True)
        return _bw

    return _make(masked[rows, arg], "max_excluding", (a,), bw)
