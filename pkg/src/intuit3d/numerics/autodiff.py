"""Tensor-valued reverse-mode differentiation over a fixed set of primitives.

Expressions are built eagerly: every primitive call computes its value right
away and records a :class:`Node`.  Wrapping the output nodes in an
:class:`ExprGraph` freezes a topological order, after which the graph can be
re-evaluated on fresh leaf bindings (:func:`evaluate`) and differentiated
(:func:`backward`).

All values are ``float64`` numpy arrays.  There is no implicit broadcasting;
the few places that need a row-wise scale use :func:`scale_rows`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "ExprGraph",
    "param",
    "leaf_input",
    "const",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "relu",
    "exp",
    "sqrt",
    "softplus",
    "sigmoid",
    "total",
    "sum_axis",
    "mean",
    "sqnorm",
    "min_select",
    "concat",
    "gather",
    "segment_sum",
    "reshape",
    "scale_rows",
    "cumsum_exclusive",
    "weighted_gather",
    "straight_through",
    "evaluate",
    "backward",
    "grad",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


_ids = itertools.count()


class Node:
    """One vertex of an expression graph.

    ``kind`` is ``"param"`` or ``"input"`` for named leaves, ``"const"`` for
    anonymous constants and ``"op"`` for primitive applications.
    """

    __slots__ = ("op", "inputs", "attrs", "value", "kind", "name", "uid")

    def __init__(self, op, inputs, attrs, value, kind="op", name=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.value = value
        self.kind = kind
        self.name = name
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def label(self) -> str:
        return f"{self.op}#{self.uid}" if self.name is None else f"{self.op}:{self.name}"

    def __repr__(self) -> str:
        return f"Node({self.label()}, shape={self.value.shape})"


# --------------------------------------------------------------------------
# primitive registry: op -> (forward(values, attrs), vjp(g, values, out, attrs))

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _primitive(name: str):
    def register(pair):
        fwd, vjp = pair()
        _FORWARD[name] = fwd
        _VJP[name] = vjp
        return pair

    return register


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


@_primitive("linear")
def _linear():
    def fwd(vals, attrs):
        x, w = vals[0], vals[1]
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: cannot map input {x.shape} with weight {w.shape}")
        out = x @ w
        if len(vals) == 3:
            b = vals[2]
            if b.shape != (w.shape[1],):
                raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
            out = out + b
        return out

    def vjp(g, vals, out, attrs):
        x, w = vals[0], vals[1]
        grads = [g @ w.T, x.T @ g]
        if len(vals) == 3:
            grads.append(g.sum(axis=0))
        return grads

    return fwd, vjp


@_primitive("add")
def _add():
    def fwd(vals, attrs):
        _same_shape("add", vals[0], vals[1])
        return vals[0] + vals[1]

    return fwd, lambda g, vals, out, attrs: [g, g]


@_primitive("sub")
def _sub():
    def fwd(vals, attrs):
        _same_shape("sub", vals[0], vals[1])
        return vals[0] - vals[1]

    return fwd, lambda g, vals, out, attrs: [g, -g]


@_primitive("mul")
def _mul():
    def fwd(vals, attrs):
        _same_shape("mul", vals[0], vals[1])
        return vals[0] * vals[1]

    return fwd, lambda g, vals, out, attrs: [g * vals[1], g * vals[0]]


@_primitive("scale")
def _scale():
    return (
        lambda vals, attrs: vals[0] * attrs["c"],
        lambda g, vals, out, attrs: [g * attrs["c"]],
    )


@_primitive("mean")
def _mean():
    # np.mean divides the sum by the count, unlike sum * (1 / count)
    return (
        lambda vals, attrs: np.asarray(np.mean(vals[0])),
        lambda g, vals, out, attrs: [np.full(vals[0].shape, g / vals[0].size)],
    )


@_primitive("add_const")
def _add_const():
    def fwd(vals, attrs):
        c = attrs["c"]
        if np.ndim(c) and np.shape(c) != vals[0].shape:
            raise ShapeError(f"add_const: constant {np.shape(c)} vs operand {vals[0].shape}")
        return vals[0] + c

    return fwd, lambda g, vals, out, attrs: [g]


@_primitive("relu")
def _relu():
    # subgradient at exactly 0 is 0
    return (
        lambda vals, attrs: np.maximum(vals[0], 0.0),
        lambda g, vals, out, attrs: [g * (vals[0] > 0.0)],
    )


@_primitive("exp")
def _exp():
    return lambda vals, attrs: np.exp(vals[0]), lambda g, vals, out, attrs: [g * out]


@_primitive("sqrt")
def _sqrt():
    # derivative taken as 0 at exactly 0
    def vjp(g, vals, out, attrs):
        safe = np.where(out > 0.0, out, 1.0)
        return [np.where(out > 0.0, g / (2.0 * safe), 0.0)]

    return lambda vals, attrs: np.sqrt(vals[0]), vjp


@_primitive("softplus")
def _softplus():
    def fwd(vals, attrs):
        x = vals[0]
        return np.logaddexp(0.0, x)

    def vjp(g, vals, out, attrs):
        return [g * _sigmoid_np(vals[0])]

    return fwd, vjp


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_primitive("sigmoid")
def _sigmoid():
    return (
        lambda vals, attrs: _sigmoid_np(vals[0]),
        lambda g, vals, out, attrs: [g * out * (1.0 - out)],
    )


@_primitive("sum")
def _sum():
    return (
        lambda vals, attrs: np.asarray(vals[0].sum()),
        lambda g, vals, out, attrs: [np.full(vals[0].shape, float(g))],
    )


@_primitive("sum_axis")
def _sum_axis():
    def vjp(g, vals, out, attrs):
        return [np.broadcast_to(np.expand_dims(g, attrs["axis"]), vals[0].shape).copy()]

    return lambda vals, attrs: vals[0].sum(axis=attrs["axis"]), vjp


@_primitive("sqnorm")
def _sqnorm():
    # squared L2 norm along the last axis
    def fwd(vals, attrs):
        x = vals[0]
        # plain sequential reduction: matches a scalar loop bit for bit
        return np.asarray(np.sum(x * x, axis=-1))

    def vjp(g, vals, out, attrs):
        return [2.0 * vals[0] * np.expand_dims(g, -1)]

    return fwd, vjp


@_primitive("min_select")
def _min_select():
    # gradient routes to the first (lowest-index) minimiser only
    def _masked(x, attrs):
        if attrs.get("exclude_diag"):
            if x.ndim != 2 or x.shape[0] != x.shape[1]:
                raise ShapeError(f"min_select: exclude_diag needs a square matrix, got {x.shape}")
            x = x.copy()
            np.fill_diagonal(x, np.inf)
        return x

    def fwd(vals, attrs):
        x = _masked(vals[0], attrs)
        axis = attrs["axis"]
        if x.shape[axis] == 0:
            raise ShapeError("min_select: empty reduction axis")
        return np.min(x, axis=axis)

    def vjp(g, vals, out, attrs):
        x = _masked(vals[0], attrs)
        axis = attrs["axis"]
        idx = np.argmin(x, axis=axis)
        dx = np.zeros_like(vals[0])
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return [dx]

    return fwd, vjp


@_primitive("concat")
def _concat():
    def fwd(vals, attrs):
        try:
            return np.concatenate(vals, axis=attrs["axis"])
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from None

    def vjp(g, vals, out, attrs):
        axis = attrs["axis"]
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return list(np.split(g, cuts, axis=axis))

    return fwd, vjp


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + g.shape[1:])
    np.add.at(out, idx, g)
    return out


@_primitive("gather")
def _gather():
    def fwd(vals, attrs):
        idx = attrs["idx"]
        if idx.size and (idx.min() < 0 or idx.max() >= vals[0].shape[0]):
            raise ShapeError(f"gather: index out of range for {vals[0].shape[0]} rows")
        return vals[0][idx]

    def vjp(g, vals, out, attrs):
        return [_scatter_rows(g, attrs["idx"], vals[0].shape[0])]

    return fwd, vjp


@_primitive("segment_sum")
def _segment_sum():
    def fwd(vals, attrs):
        idx = attrs["idx"]
        if idx.shape[0] != vals[0].shape[0]:
            raise ShapeError(f"segment_sum: {idx.shape[0]} segment ids for {vals[0].shape[0]} rows")
        return _scatter_rows(vals[0], idx, attrs["n"])

    return fwd, lambda g, vals, out, attrs: [g[attrs["idx"]]]


@_primitive("reshape")
def _reshape():
    def fwd(vals, attrs):
        try:
            return vals[0].reshape(attrs["shape"])
        except ValueError as exc:
            raise ShapeError(f"reshape: {exc}") from None

    return fwd, lambda g, vals, out, attrs: [g.reshape(vals[0].shape)]


@_primitive("scale_rows")
def _scale_rows():
    # x: (n, ...), w: (n,)
    def fwd(vals, attrs):
        x, w = vals
        if w.shape != x.shape[:1]:
            raise ShapeError(f"scale_rows: weights {w.shape} for rows of {x.shape}")
        return x * w.reshape((-1,) + (1,) * (x.ndim - 1))

    def vjp(g, vals, out, attrs):
        x, w = vals
        wb = w.reshape((-1,) + (1,) * (x.ndim - 1))
        return [g * wb, (g * x).reshape(x.shape[0], -1).sum(axis=1)]

    return fwd, vjp


@_primitive("cumsum_exclusive")
def _cumsum_exclusive():
    def fwd(vals, attrs):
        x = vals[0]
        c = np.cumsum(x, axis=-1)
        return np.concatenate([np.zeros(x.shape[:-1] + (1,)), c[..., :-1]], axis=-1)

    def vjp(g, vals, out, attrs):
        # d out_k / d x_j = 1 for j < k
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return [np.concatenate([rev[..., 1:], np.zeros(g.shape[:-1] + (1,))], axis=-1)]

    return fwd, vjp


@_primitive("weighted_gather")
def _weighted_gather():
    # out[n] = sum_k w[n, k] * table[idx[n, k]]; linear in table
    def fwd(vals, attrs):
        table = vals[0]
        idx, w = attrs["idx"], attrs["w"]
        if idx.shape != w.shape:
            raise ShapeError(f"weighted_gather: index {idx.shape} vs weight {w.shape}")
        return np.einsum("nk,nk...->n...", w, table[idx])

    def vjp(g, vals, out, attrs):
        table = vals[0]
        idx, w = attrs["idx"], attrs["w"]
        contrib = w[..., None] * g[:, None, :] if g.ndim == 2 else w * g[:, None]
        flat = contrib.reshape((-1,) + table.shape[1:])
        return [_scatter_rows(flat, idx.reshape(-1), table.shape[0])]

    return fwd, vjp


@_primitive("straight_through")
def _straight_through():
    # forward applies attrs["fn"]; backward is the identity
    def fwd(vals, attrs):
        out = np.asarray(attrs["fn"](vals[0]), dtype=np.float64)
        if out.shape != vals[0].shape:
            raise ShapeError(f"straight_through: fn changed shape {vals[0].shape} -> {out.shape}")
        return out

    return fwd, lambda g, vals, out, attrs: [g]


# --------------------------------------------------------------------------
# builders


def _apply(op: str, inputs: Sequence[Node], **attrs) -> Node:
    vals = [n.value for n in inputs]
    try:
        value = _FORWARD[op](vals, attrs)
    except ShapeError as exc:
        raise ShapeError(f"{exc} (building {op})") from None
    return Node(op, inputs, attrs, np.asarray(value, dtype=np.float64))


def _node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def param(value, name: str) -> Node:
    """Differentiable leaf; gradients are reported under ``name``."""
    return Node("leaf", (), {}, _as_array(value), kind="param", name=name)


def leaf_input(value, name: str) -> Node:
    """Named non-differentiable leaf that :func:`evaluate` may rebind."""
    return Node("leaf", (), {}, _as_array(value), kind="input", name=name)


def const(value) -> Node:
    return Node("leaf", (), {}, _as_array(value), kind="const")


def linear(x, w, b=None) -> Node:
    ins = [_node(x), _node(w)] + ([] if b is None else [_node(b)])
    return _apply("linear", ins)


def add(a, b) -> Node:
    return _apply("add", [_node(a), _node(b)])


def sub(a, b) -> Node:
    return _apply("sub", [_node(a), _node(b)])


def mul(a, b) -> Node:
    return _apply("mul", [_node(a), _node(b)])


def scale(x, c: float) -> Node:
    return _apply("scale", [_node(x)], c=float(c))


def add_const(x, c) -> Node:
    return _apply("add_const", [_node(x)], c=c if np.ndim(c) == 0 else _as_array(c))


def relu(x) -> Node:
    return _apply("relu", [_node(x)])


def exp(x) -> Node:
    return _apply("exp", [_node(x)])


def sqrt(x) -> Node:
    return _apply("sqrt", [_node(x)])


def softplus(x) -> Node:
    return _apply("softplus", [_node(x)])


def sigmoid(x) -> Node:
    return _apply("sigmoid", [_node(x)])


def total(x) -> Node:
    """Sum of every entry, as a scalar node."""
    return _apply("sum", [_node(x)])


def sum_axis(x, axis: int) -> Node:
    return _apply("sum_axis", [_node(x)], axis=axis)


def mean(x) -> Node:
    x = _node(x)
    if x.value.size == 0:
        raise ShapeError("mean: empty operand")
    return _apply("mean", [x])


def sqnorm(x) -> Node:
    return _apply("sqnorm", [_node(x)])


def min_select(x, axis: int = -1, exclude_diag: bool = False) -> Node:
    return _apply("min_select", [_node(x)], axis=axis, exclude_diag=exclude_diag)


def concat(xs: Iterable, axis: int = -1) -> Node:
    return _apply("concat", [_node(x) for x in xs], axis=axis)


def gather(x, idx) -> Node:
    return _apply("gather", [_node(x)], idx=np.asarray(idx, dtype=np.int64))


def segment_sum(x, idx, n: int) -> Node:
    return _apply("segment_sum", [_node(x)], idx=np.asarray(idx, dtype=np.int64), n=int(n))


def reshape(x, shape) -> Node:
    return _apply("reshape", [_node(x)], shape=tuple(shape))


def scale_rows(x, w) -> Node:
    return _apply("scale_rows", [_node(x), _node(w)])


def cumsum_exclusive(x) -> Node:
    return _apply("cumsum_exclusive", [_node(x)])


def weighted_gather(table, idx, w) -> Node:
    return _apply(
        "weighted_gather",
        [_node(table)],
        idx=np.asarray(idx, dtype=np.int64),
        w=_as_array(w),
    )


def straight_through(x, fn: Callable[[np.ndarray], np.ndarray]) -> Node:
    return _apply("straight_through", [_node(x)], fn=fn)


# --------------------------------------------------------------------------
# graphs


class ExprGraph:
    """Frozen view of the expression reachable from a set of named outputs."""

    def __init__(self, outputs: Mapping[str, Node] | Node):
        if isinstance(outputs, Node):
            outputs = {"out": outputs}
        self.outputs: dict[str, Node] = dict(outputs)
        self.order: list[Node] = _toposort(self.outputs.values())
        self.params: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}
        for n in self.order:
            if n.kind == "param":
                if n.name in self.params and self.params[n.name] is not n:
                    raise ValueError(f"duplicate parameter name {n.name!r}")
                self.params[n.name] = n
            elif n.kind == "input":
                self.inputs[n.name] = n
        self._values: dict[int, np.ndarray] = {n.uid: n.value for n in self.order}

    def __len__(self) -> int:
        return len(self.order)

    def value(self, node: Node) -> np.ndarray:
        return self._values[node.uid]


def _toposort(roots: Iterable[Node]) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    for root in roots:
        if root.uid in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for child in reversed(node.inputs):
                if child.uid not in seen:
                    stack.append((child, False))
    return order


def evaluate(graph: ExprGraph, inputs: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Recompute every node with leaves rebound from ``inputs``.

    Names may refer to parameter or input leaves; unbound leaves keep the
    value they were built with.  Returns the named outputs.
    """
    inputs = dict(inputs or {})
    leaves = {**graph.params, **graph.inputs}
    unknown = set(inputs) - set(leaves)
    if unknown:
        raise KeyError(f"unknown leaves: {sorted(unknown)}")
    values: dict[int, np.ndarray] = {}
    for node in graph.order:
        if node.op == "leaf":
            if node.name in inputs:
                v = _as_array(inputs[node.name])
                if v.shape != node.value.shape:
                    raise ShapeError(
                        f"leaf {node.name!r}: bound shape {v.shape}, expected {node.value.shape}"
                    )
                values[node.uid] = v
            else:
                values[node.uid] = node.value
            continue
        try:
            out = _FORWARD[node.op]([values[i.uid] for i in node.inputs], node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"{exc} (node {node.label()})") from None
        values[node.uid] = np.asarray(out, dtype=np.float64)
    graph._values = values
    return {name: values[n.uid] for name, n in graph.outputs.items()}


def backward(graph: ExprGraph, seed_output: str = "out") -> dict[str, np.ndarray]:
    """Gradient of a scalar output with respect to every parameter leaf."""
    root = graph.outputs[seed_output]
    values = graph._values
    if values[root.uid].size != 1:
        raise ValueError(f"backward seed {seed_output!r} is not scalar: shape {values[root.uid].shape}")
    grads: dict[int, np.ndarray] = {root.uid: np.ones_like(values[root.uid])}
    for node in reversed(graph.order):
        g = grads.pop(node.uid, None)
        if g is None or node.op == "leaf":
            if g is not None and node.kind == "param":
                grads[node.uid] = g
            continue
        in_vals = [values[i.uid] for i in node.inputs]
        parts = _VJP[node.op](g, in_vals, values[node.uid], node.attrs)
        for child, part in zip(node.inputs, parts):
            if child.kind == "const" or child.kind == "input":
                continue
            if child.uid in grads:
                grads[child.uid] = grads[child.uid] + part
            else:
                grads[child.uid] = part
    out = {}
    for name, node in graph.params.items():
        out[name] = grads.get(node.uid, np.zeros_like(node.value))
    return out


def grad(output: Node) -> dict[str, np.ndarray]:
    """Shorthand for ``backward(ExprGraph(output))`` on an eagerly built scalar."""
    return backward(ExprGraph({"out": output}), "out")
