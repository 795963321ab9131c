"""Dense-tensor reverse-mode autodiff on a define-by-run tape.

A ``Tensor`` wraps a float64 numpy array plus an optional gradient slot.
Every op records the node it creates (op kind, parent links); calling
``backward`` on a scalar root walks the tape in reverse topological order
and accumulates gradients additively into every reachable tensor that
requires them.

Broadcasting is deliberately restricted to scalar-with-tensor so that
shape mistakes fail loudly instead of silently fanning out.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_node_counter = itertools.count()


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatible shapes; names the op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._node_id = next(_node_counter)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Register the result of a primitive op on the tape.

        ``backward(g)`` receives the upstream gradient (same shape as
        ``data``) and must accumulate into the parents via ``accumulate``.
        Used by this module's ops and by downstream primitives (conv,
        attention, determinant) alike.
        """
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._node_id = next(_node_counter)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; numbers are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating zeros on first touch)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def backward(root: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``root``.

    ``root`` must be scalar-sized and itself require grad; gradients from
    multiple uses of one tensor accumulate additively.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root is detached (requires_grad=False)")

    # iterative postorder; creation order already topological, but we only
    # visit what is reachable and grad-requiring
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node._node_id in visited:
            continue
        visited.add(node._node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._node_id not in visited:
                stack.append((p, False))

    accumulate(root, np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive ops

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(op, a.data.shape, b.data.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # shrink a broadcast gradient back onto a size-1 operand
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)

    def back(g):
        accumulate(a, _reduce_to(g, a.data.shape))
        accumulate(b, _reduce_to(g, b.data.shape))

    return Tensor.from_op(a.data + b.data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)

    def back(g):
        accumulate(a, _reduce_to(g * b.data, a.data.shape))
        accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return Tensor.from_op(a.data * b.data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    def back(g):
        accumulate(a, -g)

    return Tensor.from_op(-a.data, (a,), back, "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        accumulate(a, g * out_data)

    return Tensor.from_op(out_data, (a,), back, "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        accumulate(a, g * mask)

    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), back, "relu")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_stable(a.data)

    def back(g):
        accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor.from_op(out_data, (a,), back, "sigmoid")


def _expand_reduced(g: np.ndarray, in_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def back(g):
        accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return Tensor.from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def back(g):
        accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return Tensor.from_op(out_data, (a,), back, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch("reshape", a.data.shape, shape)

    def back(g):
        accumulate(a, g.reshape(a.data.shape))

    return Tensor.from_op(a.data.reshape(shape), (a,), back, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(first) or any(s[i] != first[i] for i in range(len(s)) if i != axis % len(s)):
            raise ShapeMismatch("concat", *[t.data.shape for t in tensors])
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing (ints/slices/tuples); gradient scatters back into place."""
    out_data = a.data[key]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)

    def back(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return Tensor.from_op(out_data.copy(), (a,), back, "slice")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)

    def back(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return Tensor.from_op(a.data @ b.data, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must return a scalar Tensor and be rebuildable (it is re-run for
    every coordinate perturbation of ``x.data``).  Relative error is
    ``|a-b| / max(1e-12, |a|, |b|)`` per coordinate.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check: f must produce a scalar")
    if out.requires_grad:
        backward(out)
    auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        lo = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)

    a = auto.reshape(-1)
    denom = np.maximum(1e-12, np.maximum(np.abs(a), np.abs(fd)))
    rel = np.abs(a - fd) / denom
    return float(rel.max()) if rel.size else 0.0
