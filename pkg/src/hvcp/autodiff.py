"""Minimal define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation creates a new :class:`Tensor`. When at least one input requires a
gradient, the result carries a :class:`Node` recording the op kind, its inputs and
a closure that maps the output gradient to input gradients. Node ids come from a
single monotone counter, so every node's inputs have strictly smaller ids and the
reverse id order is a valid topological order for :func:`backward`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """A gradient-check function produced a non-finite value."""


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Immutable dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "node_id", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None):
        if isinstance(data, np.ndarray) and data.dtype == DTYPE:
            arr = data.view()
        else:
            arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad or _node is not None)
        self.node_id = next(_ids)
        self.node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, _node=Node(kind, tuple(inputs), backward))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 2-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


# ----------------------------------------------------------------------------
# elementwise unary


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make("relu", out, (x,), lambda g: (g * (out > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make("logistic", out, (x,), lambda g: (g * out * (1.0 - out),))


sigmoid = logistic


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _make("softplus", out, (x,), lambda g: (g * _sigmoid(v),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_(x, axis: int = 0) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def backward(g):
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (grad,)

    return _make("max", out, (x,), backward)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)] if t.requires_grad else None)
        return parts

    return _make("concat", out, tensors, backward)


def slice_(x, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters with accumulation."""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        grad = np.zeros(x.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make("slice", out, (x,), backward)


# ----------------------------------------------------------------------------
# contractions, gathers and scatters


def einsum(subscripts: str, *operands) -> Tensor:
    """Einstein summation; used for the CP outer-product contraction.

    Every index of an operand must appear in another operand or in the output,
    and operands may not repeat an index (no traces).
    """
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(ops)} operands")
    extents: dict[str, int] = {}
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim:
            raise ShapeError(f"einsum[{s}]", o.shape)
        for ch, n in zip(s, o.shape):
            if extents.setdefault(ch, n) != n:
                raise ShapeError(f"einsum[{subscripts}]", *(o.shape for o in ops))
    out = np.einsum(subscripts, *(o.data for o in ops), optimize=True)

    def backward(g):
        grads = []
        for k, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[m], ops[m].data) for m in range(len(ops)) if m != k]
            known = set(out_sub).union(*(set(si) for si, _ in others))
            target = "".join(ch for ch in s if ch in known)
            spec = ",".join([si for si, _ in others] + [out_sub]) + "->" + target
            gk = np.einsum(spec, *[d for _, d in others], g, optimize=True)
            if target != s:
                gk = np.broadcast_to(np.expand_dims(gk, [s.index(ch) for ch in s if ch not in known]),
                                     o.shape)
            grads.append(gk)
        return grads

    return _make("einsum", out, ops, backward)


def outer_contract(vx, vy, vz) -> Tensor:
    """Sum over rank of per-channel outer products of three axis factors.

    ``vx`` (H,R,d), ``vy`` (W,R,d), ``vz`` (D,R,d) -> (H,W,D,d).
    """
    return einsum("irt,jrt,krt->ijkt", vx, vy, vz)


def _selector(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = index.size
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))


def gather(x, index) -> Tensor:
    """Rows of ``x`` selected by an integer index array of any shape."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather: index out of range for extent {x.shape[0]}")
    out = x.data[index]

    def backward(g):
        rows = _selector(index.reshape(-1), x.shape[0])
        flat = g.reshape(index.size, -1)
        return (np.asarray(rows @ flat).reshape(x.shape),)

    return _make("gather", out, (x,), backward)


def weighted_gather(x, index, weights) -> Tensor:
    """``sum_k weights[q,k] * x[index[q,k]]`` for constant index and weights.

    Equivalent to gather, multiply and sum, but a single sparse product in both
    directions, which matters for trilinear interpolation of large query sets.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if index.shape != weights.shape or index.ndim != 2:
        raise ShapeError("weighted_gather", index.shape, weights.shape)
    q, k = index.shape
    mat = sp.csr_matrix((weights.reshape(-1), (np.repeat(np.arange(q), k), index.reshape(-1))),
                        shape=(q, x.shape[0]))
    flat = x.data.reshape(x.shape[0], -1)
    out = np.asarray(mat @ flat).reshape((q,) + x.shape[1:])
    return _make("weighted_gather", out, (x,),
                 lambda g: (np.asarray(mat.T @ g.reshape(q, -1)).reshape(x.shape),))


def scatter_reduce(x, index, num_segments: int, reduce: str = "max") -> Tensor:
    """Reduce rows of ``x`` (N, C) into ``num_segments`` rows by ``index`` (N,).

    Empty segments are zero. For ``max``, ties send the gradient to the lowest
    row index among the maximal entries, which keeps backward deterministic.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"scatter_{reduce}", x.shape, index.shape)
    n, c = x.shape
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    segs = sorted_idx[starts]
    counts = np.diff(np.r_[starts, n])
    xs = x.data[order]

    if reduce == "max":
        red = np.maximum.reduceat(xs, starts, axis=0)
        out = np.zeros((num_segments, c))
        out[segs] = red
        # first row (in original order) attaining the max, per segment and channel
        seg_of_row = np.repeat(np.arange(len(starts)), counts)
        hit = xs == red[seg_of_row]
        cand = np.where(hit, order[:, None], n)
        winner = np.minimum.reduceat(cand, starts, axis=0)

        def backward(g):
            grad = np.zeros((n, c))
            cols = np.broadcast_to(np.arange(c), winner.shape)
            grad[winner, cols] = g[segs]
            return (grad,)

    elif reduce == "mean":
        red = np.add.reduceat(xs, starts, axis=0) / counts[:, None]
        out = np.zeros((num_segments, c))
        out[segs] = red
        scale = np.zeros(num_segments)
        scale[segs] = 1.0 / counts

        def backward(g):
            return ((g * scale[:, None])[index],)

    else:
        raise ValueError(f"unknown scatter reduction {reduce!r}")

    return _make(f"scatter_{reduce}", out, (x,), backward)


# ----------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable leaf requiring grad.

    Returns a map from leaf ``node_id`` to a gradient array of the leaf's shape.
    Deterministic for identical graphs: nodes are processed in descending id
    order and accumulation order is fixed by the graph structure.
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return {}
    # collect reachable tensors
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        if t.node is not None:
            stack.extend(i for i in t.node.inputs if i.requires_grad)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, np.ndarray] = {}
    for nid in sorted(seen, reverse=True):
        t = seen[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.node is None:
            leaves[nid] = np.array(g, dtype=DTYPE).reshape(t.shape)
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
    return leaves


def grad_check(function: Callable[[Sequence[Tensor]], Tensor], params: Sequence,
               eps: float = 1e-6, indices: Iterable[tuple[int, int]] | None = None) -> float:
    """Max relative error between backward and central differences.

    ``function`` receives a list of fresh leaf tensors and returns a scalar.
    The error per entry is ``|a - n| / max(1e-8, |a| + |n|)``. ``indices``
    restricts the check to ``(param, flat_entry)`` pairs, else all entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = [np.array(as_tensor(p).data, dtype=DTYPE) for p in params]
    leaves = [Tensor(v, requires_grad=True) for v in values]
    out = function(leaves)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("function value is not finite at the base point")
    grads = backward(out)
    analytic = [grads.get(t.node_id, np.zeros(t.shape)).reshape(-1) for t in leaves]

    def evaluate(k: int, j: int, delta: float) -> float:
        shifted = [v.copy() for v in values]
        shifted[k].reshape(-1)[j] += delta
        value = function([Tensor(v) for v in shifted]).item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite function value perturbing parameter {k}, entry {j}")
        return value

    if indices is None:
        indices = [(k, j) for k, v in enumerate(values) for j in range(v.size)]
    worst = 0.0
    for k, j in indices:
        numeric = (evaluate(k, j, eps) - evaluate(k, j, -eps)) / (2.0 * eps)
        a = analytic[k][j]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
