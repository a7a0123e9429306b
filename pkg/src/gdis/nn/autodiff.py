"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the handful of ops the attention GNN, HSIC penalty and estimator head
need are provided. Shapes must match exactly except where an op documents a
specific row/column broadcast.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _backward=None, op: str = "leaf"):
        self.value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"non-finite values produced by {op}"
                                     + (f" ({name})" if name else ""))
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}{', grad' if self.requires_grad else ''})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()

        def visit(node):
            # iterative post-order; graphs are deep enough to hit recursion limits
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name, op="param")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None, op=op)


def _need_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if a.value.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        shape = b.shape
        return _make(a.value + b.value.reshape(1, -1), (a, b),
                     lambda g: (g, g.sum(axis=0).reshape(shape)), "add_row")
    raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _need_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may also be an (n, 1) column scaling ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if a.shape == b.shape:
        return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")
    if av.ndim == 2 and b.shape == (a.shape[0], 1):
        return _make(av * bv, (a, b),
                     lambda g: (g * bv, np.sum(g * av, axis=1, keepdims=True)), "mul_col")
    raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    other = [t.shape[:axis] + t.shape[axis + 1:] for t in ts]
    if any(o != other[0] for o in other):
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    slope = np.where(a.value > 0, 1.0, negative_slope)
    return _make(a.value * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    neg = alpha * np.expm1(np.minimum(a.value, 0.0))
    out = np.where(a.value > 0, a.value, neg)
    deriv = np.where(a.value > 0, 1.0, neg + alpha)
    return _make(out, (a,), lambda g: (g * deriv,), "elu")


def total(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.value.size
    return _make(np.mean(a.value), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back, "gather_rows")


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """Row ``k`` of ``a`` is added into output row ``segments[k]``."""
    a = _as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ValueError(f"segment_sum: {seg.shape} segments for {a.shape[0]} rows")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, seg, a.value)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(a, segments, num_segments: int) -> Tensor:
    """Softmax of an (E, 1) score column within each segment (masked row softmax on edges)."""
    a = _as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if a.value.ndim != 2 or a.shape[1] != 1 or seg.shape != (a.shape[0],):
        raise ValueError(f"segment_softmax: scores {a.shape} vs segments {seg.shape}")
    s = a.value[:, 0]
    top = np.full(num_segments, -np.inf)
    np.maximum.at(top, seg, s)
    e = np.exp(s - top[seg])
    den = np.zeros(num_segments)
    np.add.at(den, seg, e)
    p = (e / den[seg])[:, None]

    def back(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, seg, (g * p)[:, 0])
        return (p * (g - dot[seg][:, None]),)

    return _make(p, (a,), back, "segment_softmax")


def row_softmax(a, mask=None) -> Tensor:
    """Dense row softmax; entries where ``mask`` is False get probability 0."""
    a = _as_tensor(a)
    v = a.value
    mask = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ValueError(f"row_softmax: mask {mask.shape} vs scores {v.shape}")
    if not np.all(mask.any(axis=1)):
        raise ValueError("row_softmax: every row needs at least one unmasked entry")
    shifted = np.where(mask, v, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, (a,), lambda g: (p * (g - np.sum(g * p, axis=1, keepdims=True)),),
                 "row_softmax")


def center(k) -> Tensor:
    """Double centring C K C with C = I - 11^T / m."""
    k = _as_tensor(k)
    if k.value.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"center: need a square matrix, got {k.shape}")

    def cc(m):
        return m - m.mean(axis=0, keepdims=True) - m.mean(axis=1, keepdims=True) + m.mean()

    return _make(cc(k.value), (k,), lambda g: (cc(g),), "center")
