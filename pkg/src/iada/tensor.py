"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` records every operation applied to its tensors in execution
order.  Because nodes are only ever appended, the node list is already a
topological order and :meth:`Graph.backward` is a single reverse sweep.

Plain numpy arrays passed to an operation are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat_rows",
    "slice_rows",
    "embedding",
    "relu",
    "exp",
    "softmax",
    "log_softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "sum_all",
    "pick",
    "dropout",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@dataclass
class Node:
    tag: str
    inputs: tuple[int, ...]
    # backward(grad_out, need) -> one grad (or None) per input; need[i] is False
    # when input i's gradient would be discarded
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple] | None = None


class Tensor:
    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: np.ndarray, graph: Graph | None = None, node_id: int | None = None):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Graph:
    """Append-only operation record plus the gradients of the last backward."""

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def leaf(self, data, tag: str = "leaf") -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        return self._append(Node(tag, ()), arr)

    def _append(self, node: Node, data: np.ndarray) -> Tensor:
        self.nodes.append(node)
        return Tensor(data, self, len(self.nodes) - 1)

    def record(self, tag: str, inputs: Sequence, data: np.ndarray, backward) -> Tensor:
        ids = []
        for t in inputs:
            if isinstance(t, Tensor):
                if t.graph is not self:
                    raise ValueError(f"{tag}: operand belongs to a different graph")
                ids.append(t.node_id)
            else:
                ids.append(None)
        return self._append(Node(tag, tuple(ids), backward), data)

    def backward(self, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Populate ``grads`` with d(root)/d(node).

        With ``wrt`` given, only nodes on a path from those tensors to the root
        receive gradients; everything else reads as zero.
        """
        if root.graph is not self:
            raise ValueError("root does not belong to this graph")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        live = self._live(root.node_id, wrt)
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            need = tuple(i is not None and live[i] for i in node.inputs)
            for inp, ok, gi in zip(node.inputs, need, node.backward(g, need)):
                if not ok or gi is None:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = gi
        self.grads = grads
        return grads

    def _live(self, upto: int, wrt) -> list[bool]:
        if wrt is None:
            return [True] * (upto + 1)
        live = [False] * (upto + 1)
        for t in wrt:
            if t.node_id <= upto:
                live[t.node_id] = True
        for nid in range(upto + 1):
            if not live[nid]:
                live[nid] = any(i is not None and live[i] for i in self.nodes[nid].inputs)
        return live

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``t`` (zeros when off-path)."""
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor) and x.graph is not None:
            return x.graph
    raise ValueError("operation needs at least one graph tensor")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _broadcast_shape("add", ad, bd)
    sa, sb = ad.shape, bd.shape
    return _graph_of(a, b).record(
        "add", (a, b), ad + bd,
        lambda g, need: (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None),
    )


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _broadcast_shape("sub", ad, bd)
    sa, sb = ad.shape, bd.shape
    return _graph_of(a, b).record(
        "sub", (a, b), ad - bd,
        lambda g, need: (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(-g, sb) if need[1] else None),
    )


def mul(a, b) -> Tensor:
    """Elementwise product."""
    ad, bd = _data(a), _data(b)
    _broadcast_shape("mul", ad, bd)
    return _graph_of(a, b).record(
        "mul", (a, b), ad * bd,
        lambda g, need: (
            _unbroadcast(g * bd, ad.shape) if need[0] else None,
            _unbroadcast(g * ad, bd.shape) if need[1] else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph.record("scale", (a,), a.data * c, lambda g, need: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand is shared."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes {ad.shape} and {bd.shape} differ")
    out = ad @ bd

    def backward(g, need):
        ga = g @ np.swapaxes(bd, -1, -2) if need[0] else None
        if not need[1]:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _graph_of(a, b).record("matmul", (a, b), out, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    datas = [_data(p) for p in parts]
    tail = {d.shape[1:] for d in datas}
    if len(tail) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {[d.shape for d in datas]}")
    bounds = np.cumsum([0] + [d.shape[0] for d in datas])

    def backward(g, need):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(datas)))

    return _graph_of(*parts).record("concat_rows", tuple(parts), np.concatenate(datas, axis=0), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def backward(g, need):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return a.graph.record("slice_rows", (a,), a.data[start:stop], backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")
    shape = table.shape

    def backward(g, need):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return table.graph.record("embedding", (table,), table.data[ids], backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return a.graph.record("relu", (a,), np.where(keep, a.data, 0.0), lambda g, need: (g * keep,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.graph.record("exp", (a,), out, lambda g, need: (g * out,))


def _check_axis(op: str, a: np.ndarray, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", a.data, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g, need):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return a.graph.record("softmax", (a,), p, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", a.data, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g, need):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return a.graph.record("log_softmax", (a,), out, backward)


def layer_norm(x: Tensor, gain, bias, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    axis = _check_axis("layer_norm", x.data, axis)
    gd, bd = _data(gain), _data(bias)
    n = x.shape[axis]
    if gd.shape != (n,) or bd.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gd.shape} / bias {bd.shape} vs axis size {n} of {x.shape}")
    bshape = [1] * x.data.ndim
    bshape[axis] = n
    gb, bb = gd.reshape(bshape), bd.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    others = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward(g, need):
        gxhat = g * gb
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        ggain = (g * xhat).sum(axis=others) if need[1] else None
        gbias = g.sum(axis=others) if need[2] else None
        return gx, ggain, gbias

    return _graph_of(x).record("layer_norm", (x, gain, bias), xhat * gb + bb, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return a.graph.record("reshape", (a,), out, lambda g, need: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return a.graph.record("transpose", (a,), a.data.transpose(axes), lambda g, need: (g.transpose(inverse),))


def sum_all(a: Tensor, weights=None) -> Tensor:
    """Sum of all entries, optionally weighted elementwise by a constant array."""
    if weights is None:
        return a.graph.record("sum", (a,), np.array(a.data.sum()), lambda g, need: (np.full(a.shape, float(g)),))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"sum_all: weights {w.shape} vs tensor {a.shape}")
    return a.graph.record("wsum", (a,), np.array((a.data * w).sum()), lambda g, need: (w * float(g),))


def pick(a: Tensor, index) -> Tensor:
    """``out[...] = a[..., index[...]]``: gather one entry along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} vs leading shape {a.shape[:-1]}")
    idx = index[..., None]
    shape = a.shape

    def backward(g, need):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return a.graph.record("pick", (a,), np.take_along_axis(a.data, idx, axis=-1)[..., 0], backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a.graph.record("dropout", (a,), a.data * keep, lambda g, need: (g * keep,))
