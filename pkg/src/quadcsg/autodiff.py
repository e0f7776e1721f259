"""Reverse-mode differentiation over dense 2-D matrices.

A :class:`Graph` records a fixed sequence of matrix operations.  Leaves are
either trainable parameters, rebindable inputs, or constants.  The same graph
can be evaluated many times with fresh bindings, and :meth:`Graph.backward`
returns gradients for every parameter leaf.

Only the handful of operations needed by the CSG pipeline are supported.
There is no broadcasting: binary elementwise operations require equal shapes.

Subgradient conventions at kinks:

* ``relu'(0) = 0`` and ``abs'(0) = 0``
* ``clip01'`` is 1 strictly inside (0, 1), 0 elsewhere
* ``rowmin`` routes the gradient to the lowest-index minimiser
* max/min against a constant (and between two nodes) sends ties to the
  first (variable) argument
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    pass


class BindingError(KeyError):
    pass


def as_matrix(value, dtype=np.float64) -> np.ndarray:
    """Coerce ``value`` to a finite 2-D array.  Scalars become 1x1, vectors columns."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf")
    return arr


class Node:
    """Handle to one node of a :class:`Graph`; supports arithmetic operators."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.graph._shapes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    def __repr__(self):
        return f"Node({self.id}, {self.graph._ops[self.id]}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.graph.sub(self, other)
        return self.graph.shift(self, -other)

    def __rsub__(self, other):
        return self.graph.shift(self.graph.scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    @property
    def T(self):
        return self.graph.transpose(self)

    def relu(self):
        return self.graph.relu(self)

    def clip01(self):
        return self.graph.clip01(self)

    def abs(self):
        return self.graph.abs(self)

    def square(self):
        return self.graph.square(self)

    def sum(self):
        return self.graph.sum(self)

    def mean(self):
        return self.graph.mean(self)

    def cols(self, start: int, stop: int):
        return self.graph.cols(self, start, stop)

    def rows(self, start: int, stop: int):
        return self.graph.rows(self, start, stop)


_LEAVES = ("param", "input", "const")


class Graph:
    """A recorded expression DAG over dense matrices.

    Node ids are assigned in creation order, which is also a valid topological
    order, so evaluation is a single forward sweep.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list = []
        self._shapes: list[tuple[int, int]] = []
        self._needs_grad: list[bool] = []
        self._names: dict[str, int] = {}
        self._values: list[np.ndarray | None] = []

    def __len__(self):
        return len(self._ops)

    # -- construction -----------------------------------------------------

    def _append(self, op, inputs, shape, attr=None, needs_grad=None) -> Node:
        ids = tuple(n.id for n in inputs)
        for n in inputs:
            if n.graph is not self:
                raise ValueError("node belongs to a different graph")
        if needs_grad is None:
            needs_grad = any(self._needs_grad[i] for i in ids)
        self._ops.append(op)
        self._inputs.append(ids)
        self._attrs.append(attr)
        self._shapes.append(tuple(int(s) for s in shape))
        self._needs_grad.append(bool(needs_grad))
        self._values.append(None)
        return Node(self, len(self._ops) - 1)

    def _leaf(self, kind, name, shape, trainable):
        if name in self._names:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = self._append(kind, (), shape, attr=name, needs_grad=trainable)
        self._names[name] = node.id
        return node

    def param(self, name: str, shape) -> Node:
        """Differentiable leaf; must be bound at every evaluation."""
        return self._leaf("param", name, shape, True)

    def input(self, name: str, shape) -> Node:
        """Non-differentiable leaf; must be bound at every evaluation."""
        return self._leaf("input", name, shape, False)

    def const(self, value) -> Node:
        arr = as_matrix(value, self.dtype)
        node = self._append("const", (), arr.shape, attr=None, needs_grad=False)
        self._values[node.id] = arr
        return node

    def leaf(self, name: str) -> Node:
        return Node(self, self._names[name])

    @property
    def param_names(self) -> list[str]:
        return [n for n, i in self._names.items() if self._ops[i] == "param"]

    @staticmethod
    def _same_shape(kind, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        return self._append("matmul", (a, b), (a.shape[0], b.shape[1]))

    def add(self, a, b):
        self._same_shape("add", a, b)
        return self._append("add", (a, b), a.shape)

    def sub(self, a, b):
        self._same_shape("sub", a, b)
        return self._append("sub", (a, b), a.shape)

    def mul(self, a, b):
        self._same_shape("mul", a, b)
        return self._append("mul", (a, b), a.shape)

    def maximum(self, a, b):
        self._same_shape("maximum", a, b)
        return self._append("maximum", (a, b), a.shape)

    def minimum(self, a, b):
        self._same_shape("minimum", a, b)
        return self._append("minimum", (a, b), a.shape)

    def scale(self, a, k: float):
        return self._append("scale", (a,), a.shape, float(k))

    def shift(self, a, k: float):
        return self._append("shift", (a,), a.shape, float(k))

    def relu(self, a):
        return self._append("relu", (a,), a.shape)

    def leaky_relu(self, a, slope: float = 0.01):
        return self._append("leaky_relu", (a,), a.shape, float(slope))

    def clip01(self, a):
        return self._append("clip01", (a,), a.shape)

    def abs(self, a):
        return self._append("abs", (a,), a.shape)

    def square(self, a):
        return self._append("square", (a,), a.shape)

    def max_const(self, a, k: float):
        return self._append("max_const", (a,), a.shape, float(k))

    def min_const(self, a, k: float):
        return self._append("min_const", (a,), a.shape, float(k))

    def rowmin(self, a):
        if a.shape[1] == 0:
            raise ShapeError("rowmin of a matrix with no columns")
        return self._append("rowmin", (a,), (a.shape[0], 1))

    def rowsum(self, a):
        return self._append("rowsum", (a,), (a.shape[0], 1))

    def sum(self, a):
        return self._append("sum", (a,), (1, 1))

    def mean(self, a):
        return self._append("mean", (a,), (1, 1))

    def transpose(self, a):
        return self._append("transpose", (a,), (a.shape[1], a.shape[0]))

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        if shape[0] * shape[1] != a.shape[0] * a.shape[1]:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        return self._append("reshape", (a,), shape, shape)

    def cols(self, a, start: int, stop: int):
        if not 0 <= start <= stop <= a.shape[1]:
            raise ShapeError(f"cols: slice [{start}:{stop}] out of range for {a.shape}")
        return self._append("cols", (a,), (a.shape[0], stop - start), (start, stop))

    def rows(self, a, start: int, stop: int):
        if not 0 <= start <= stop <= a.shape[0]:
            raise ShapeError(f"rows: slice [{start}:{stop}] out of range for {a.shape}")
        return self._append("rows", (a,), (stop - start, a.shape[1]), (start, stop))

    def indicator(self, a, cmp: str, threshold: float):
        """0/1 matrix of ``a < threshold`` (cmp='<') or ``a > threshold`` (cmp='>').

        Carries no gradient.
        """
        if cmp not in ("<", ">"):
            raise ValueError(f"unknown comparison {cmp!r}")
        return self._append("indicator", (a,), a.shape, (cmp, float(threshold)), needs_grad=False)

    def quantize(self, a, eta: float, straight_through: bool = False):
        """``1 if a > eta else 0``.  Gradient is identity when straight-through, else zero."""
        return self._append(
            "quantize", (a,), a.shape, (float(eta), bool(straight_through)),
            needs_grad=straight_through and self._needs_grad[a.id],
        )

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, bindings: dict, outputs: Iterable[Node] | None = None):
        """Run the forward sweep.  Returns values of ``outputs`` (all nodes cached)."""
        vals = self._values
        for name, i in self._names.items():
            if name not in bindings:
                raise BindingError(f"leaf {name!r} is not bound")
            arr = as_matrix(bindings[name], self.dtype)
            if arr.shape != self._shapes[i]:
                raise ShapeError(
                    f"binding {name!r}: expected shape {self._shapes[i]}, got {arr.shape}"
                )
            vals[i] = arr
        for i, op in enumerate(self._ops):
            if op in _LEAVES:
                continue
            args = [vals[j] for j in self._inputs[i]]
            vals[i] = _FORWARD[op](self._attrs[i], *args)
        if outputs is None:
            return None
        return [vals[n.id] for n in outputs]

    def value(self, node: Node) -> np.ndarray:
        v = self._values[node.id]
        if v is None:
            raise RuntimeError("graph has not been evaluated")
        return v

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every parameter leaf."""
        if root.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        vals = self._values
        if vals[root.id] is None:
            raise RuntimeError("graph has not been evaluated")
        grads: list[np.ndarray | None] = [None] * (root.id + 1)
        grads[root.id] = np.ones((1, 1), dtype=self.dtype)
        for i in range(root.id, -1, -1):
            g = grads[i]
            op = self._ops[i]
            if g is None or op in _LEAVES or not self._needs_grad[i]:
                continue
            ids = self._inputs[i]
            args = [vals[j] for j in ids]
            if op in ("matmul", "mul"):
                a, b = args
                need_a, need_b = (self._needs_grad[j] for j in ids)
                if op == "matmul":
                    pair = (g @ b.T if need_a else None, a.T @ g if need_b else None)
                else:
                    pair = (g * b if need_a else None, g * a if need_b else None)
            else:
                pair = _BACKWARD[op](self._attrs[i], g, vals[i], *args)
            for j, gj in zip(ids, pair):
                if gj is None or not self._needs_grad[j]:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name in self.param_names:
            i = self._names[name]
            g = grads[i] if i <= root.id else None
            out[name] = np.zeros(self._shapes[i], self.dtype) if g is None else g
        return out

    def kink_margin(self, skip_exact: bool = False) -> float:
        """Smallest distance of any evaluated kink-op input from its kink.

        Used to pick bindings where finite differences are meaningful.  With
        ``skip_exact``, entries sitting exactly on a kink are ignored: in random
        bindings those come from saturated upstream values (e.g. a sum of
        clamped zeros) that stay put under small perturbations.
        """
        margin = np.inf
        vals = self._values
        for i, op in enumerate(self._ops):
            if op not in _KINKS or not any(self._needs_grad[j] for j in self._inputs[i]):
                continue
            args = [vals[j] for j in self._inputs[i]]
            m = _KINKS[op](self._attrs[i], skip_exact, *args)
            margin = min(margin, m)
        return float(margin)


def _min_abs(x, skip_exact=False):
    d = np.abs(x)
    if skip_exact:
        d = d[d > 0]
    return float(np.min(d)) if d.size else np.inf


def _rowmin_gap(a, skip_exact=False):
    if a.shape[1] < 2:
        return np.inf
    part = np.partition(a, 1, axis=1)
    return _min_abs(part[:, 1] - part[:, 0], skip_exact)


_KINKS: dict[str, Callable] = {
    "relu": lambda _, s, a: _min_abs(a, s),
    "leaky_relu": lambda _, s, a: _min_abs(a, s),
    "abs": lambda _, s, a: _min_abs(a, s),
    "clip01": lambda _, s, a: min(_min_abs(a, s), _min_abs(a - 1.0, s)),
    "max_const": lambda k, s, a: _min_abs(a - k, s),
    "min_const": lambda k, s, a: _min_abs(a - k, s),
    "maximum": lambda _, s, a, b: _min_abs(a - b, s),
    "minimum": lambda _, s, a, b: _min_abs(a - b, s),
    "rowmin": lambda _, s, a: _rowmin_gap(a, s),
    "indicator": lambda attr, s, a: _min_abs(a - attr[1], s),
    "quantize": lambda attr, s, a: _min_abs(a - attr[0], s),
}


def _indicator(attr, a):
    cmp, thr = attr
    return ((a < thr) if cmp == "<" else (a > thr)).astype(a.dtype)


_FORWARD: dict[str, Callable] = {
    "matmul": lambda _, a, b: a @ b,
    "add": lambda _, a, b: a + b,
    "sub": lambda _, a, b: a - b,
    "mul": lambda _, a, b: a * b,
    "maximum": lambda _, a, b: np.maximum(a, b),
    "minimum": lambda _, a, b: np.minimum(a, b),
    "scale": lambda k, a: a * k,
    "shift": lambda k, a: a + k,
    "relu": lambda _, a: np.maximum(a, 0.0),
    "leaky_relu": lambda s, a: np.where(a > 0, a, a * s),
    "clip01": lambda _, a: np.clip(a, 0.0, 1.0),
    "abs": lambda _, a: np.abs(a),
    "square": lambda _, a: a * a,
    "max_const": lambda k, a: np.maximum(a, k),
    "min_const": lambda k, a: np.minimum(a, k),
    "rowmin": lambda _, a: a.min(axis=1, keepdims=True),
    "rowsum": lambda _, a: a.sum(axis=1, keepdims=True),
    "sum": lambda _, a: a.sum().reshape(1, 1),
    "mean": lambda _, a: a.mean().reshape(1, 1),
    "transpose": lambda _, a: np.ascontiguousarray(a.T),
    "reshape": lambda shape, a: a.reshape(shape),
    "cols": lambda attr, a: a[:, attr[0]:attr[1]],
    "rows": lambda attr, a: a[attr[0]:attr[1]],
    "indicator": _indicator,
    "quantize": lambda attr, a: (a > attr[0]).astype(a.dtype),
}


def _rowmin_backward(_, g, out, a):
    grad = np.zeros_like(a)
    grad[np.arange(a.shape[0]), np.argmin(a, axis=1)] = g[:, 0]
    return (grad,)


def _cols_backward(attr, g, out, a):
    grad = np.zeros_like(a)
    grad[:, attr[0]:attr[1]] = g
    return (grad,)


def _rows_backward(attr, g, out, a):
    grad = np.zeros_like(a)
    grad[attr[0]:attr[1]] = g
    return (grad,)


_BACKWARD: dict[str, Callable] = {
    "add": lambda _, g, out, a, b: (g, g),
    "sub": lambda _, g, out, a, b: (g, -g),
    "maximum": lambda _, g, out, a, b: (g * (a >= b), g * (a < b)),
    "minimum": lambda _, g, out, a, b: (g * (a <= b), g * (a > b)),
    "scale": lambda k, g, out, a: (g * k,),
    "shift": lambda k, g, out, a: (g,),
    "relu": lambda _, g, out, a: (g * (a > 0),),
    "leaky_relu": lambda s, g, out, a: (np.where(a > 0, g, g * s),),
    "clip01": lambda _, g, out, a: (g * ((a > 0) & (a < 1)),),
    "abs": lambda _, g, out, a: (g * np.sign(a),),
    "square": lambda _, g, out, a: (2.0 * a * g,),
    "max_const": lambda k, g, out, a: (g * (a >= k),),
    "min_const": lambda k, g, out, a: (g * (a <= k),),
    "rowmin": _rowmin_backward,
    "rowsum": lambda _, g, out, a: (np.repeat(g, a.shape[1], axis=1),),
    "sum": lambda _, g, out, a: (np.full_like(a, g[0, 0]),),
    "mean": lambda _, g, out, a: (np.full_like(a, g[0, 0] / a.size),),
    "transpose": lambda _, g, out, a: (g.T,),
    "reshape": lambda _, g, out, a: (g.reshape(a.shape),),
    "cols": _cols_backward,
    "rows": _rows_backward,
    "indicator": lambda _, g, out, a: (None,),
    "quantize": lambda attr, g, out, a: ((g if attr[1] else None),),
}

def backpropagate(graph: Graph, root: Node) -> dict[str, np.ndarray]:
    return graph.backward(root)


def evaluate(graph: Graph, bindings: dict, outputs: Iterable[Node]):
    return graph.evaluate(bindings, outputs)


def finite_difference_check(graph: Graph, bindings: dict, root: Node, epsilon: float) -> float:
    """Compare backprop gradients with central differences on every parameter entry.

    Returns ``max |analytic - numeric| / max(1, |analytic|)``.  The caller must
    keep every kink at least ``epsilon``-sensitivity away (see
    :meth:`Graph.kink_margin`).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    bindings = {k: as_matrix(v, graph.dtype).copy() for k, v in bindings.items()}
    graph.evaluate(bindings)
    analytic = graph.backward(root)
    worst = 0.0
    for name, grad in analytic.items():
        leaf = bindings[name]
        for idx in np.ndindex(leaf.shape):
            orig = leaf[idx]
            leaf[idx] = orig + epsilon
            (hi,) = graph.evaluate(bindings, [root])
            hi = hi[0, 0]
            leaf[idx] = orig - epsilon
            (lo,) = graph.evaluate(bindings, [root])
            lo = lo[0, 0]
            leaf[idx] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(grad[idx] - numeric) / max(1.0, abs(grad[idx]))
            worst = max(worst, err)
    graph.evaluate(bindings)
    return worst


def expression(fn):
    """Let ``fn`` (written against :class:`Node`) also run eagerly on arrays.

    If no argument is a Node, array-like arguments are wrapped as constants of
    a throwaway float64 graph and the result is evaluated.  1x1 results come
    back as floats, other results as 2-D arrays; tuples and NamedTuples are
    mapped element-wise.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, Node) for a in (*args, *kwargs.values())):
            return fn(*args, **kwargs)
        graph = Graph()

        def wrap(a):
            if isinstance(a, (np.ndarray, list, tuple)):
                return graph.const(a)
            return a

        result = fn(*map(wrap, args), **{k: wrap(v) for k, v in kwargs.items()})
        graph.evaluate({})
        return _unwrap(result)

    return wrapper


def _unwrap(result):
    if isinstance(result, Node):
        v = result.value
        return float(v[0, 0]) if v.shape == (1, 1) else v.copy()
    if isinstance(result, tuple):
        items = [_unwrap(r) for r in result]
        return type(result)(*items) if hasattr(result, "_fields") else tuple(items)
    return result


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
