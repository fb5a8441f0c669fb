"""Dense-tensor reverse-mode automatic differentiation.

A define-by-run tape: every operation appends a node (op kind, input node
ids, cached forward value) to a ``Graph``. Backward rules are written in
terms of the same public ops, so calling :func:`backward` with
``build_graph=True`` records the gradient computation as ordinary graph
nodes that can be differentiated a second time. All arithmetic is float64.

Gradients use subgradient conventions at kinks: relu and max-over-axis
route gradient through a constant mask, so their second derivative is zero
everywhere.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names the op."""


class GraphError(ValueError):
    """Malformed graph usage (cross-graph ops, non-scalar root, ...)."""


class NonFiniteError(FloatingPointError):
    """A forward value came out NaN/Inf."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Immutable float64 array, optionally bound to a graph node."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: "Graph | None" = None, node: int | None = None):
        self.data = _as_f64(data)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.graph is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, _coerce(other))

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("kind", "inputs", "value", "attrs")

    def __init__(self, kind: str, inputs: tuple[int, ...], value: np.ndarray, attrs: dict | None):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.attrs = attrs or {}


class Graph:
    """Append-only op tape. Node inputs always reference earlier nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grad_enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        value = _as_f64(data)
        self.nodes.append(Node("leaf", (), value, None))
        return Tensor(value, self, len(self.nodes) - 1)

    # constants are just leaves nobody asks gradients for
    constant = leaf

    def _add_node(self, kind: str, input_ids: tuple[int, ...], value: np.ndarray, attrs) -> int:
        self.nodes.append(Node(kind, input_ids, value, attrs))
        return len(self.nodes) - 1


def _emit(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, attrs: dict | None = None) -> Tensor:
    graph = None
    for t in inputs:
        if t.tracked:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{kind}: operands belong to different graphs")
    if graph is None or not graph.grad_enabled:
        return Tensor(value)
    ids = tuple(
        t.node if t.tracked else graph._add_node("leaf", (), t.data, None)
        for t in inputs
    )
    return Tensor(value, graph, graph._add_node(kind, ids, value, attrs))


# ---------------------------------------------------------------------------
# forward rules (pure value level, shared by ops and graph replay)

def _check_2d(name, a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D operands, got {a.shape} @ {b.shape}")


def _fwd_add(a, b, attrs):
    return a + b


def _fwd_sub(a, b, attrs):
    return a - b


def _fwd_mul(a, b, attrs):
    return a * b


def _fwd_scale(a, attrs):
    return a * attrs["c"]


def _fwd_matmul(a, b, attrs):
    _check_2d("matmul", a, b)
    a2 = a.T if attrs["ta"] else a
    b2 = b.T if attrs["tb"] else b
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a2.shape} @ {b2.shape}")
    return a2 @ b2


def _fwd_relu(a, attrs):
    return np.maximum(a, 0.0)


def _fwd_sigmoid(a, attrs):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_reshape(a, attrs):
    return a.reshape(attrs["shape"])


def _fwd_sum(a, attrs):
    return np.sum(a, axis=attrs["axis"], keepdims=attrs["keepdims"])


def _fwd_mean(a, attrs):
    return np.mean(a, axis=attrs["axis"], keepdims=attrs["keepdims"])


def _fwd_max_over_axis(a, attrs):
    return np.max(a, axis=attrs["axis"], keepdims=attrs["keepdims"])


def _fwd_gather_rows(a, attrs):
    return a[attrs["index"]]


def _fwd_scatter_rows(a, attrs):
    out = np.zeros((attrs["n_rows"],) + a.shape[1:], dtype=np.float64)
    np.add.at(out, attrs["index"], a)
    return out


def _fwd_softmax(a, attrs):
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _fwd_softmax_cross_entropy(a, attrs):
    logits = a if a.ndim == 2 else a.reshape(1, -1)
    labels = attrs["labels"]
    m = np.max(logits, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    picked = logits[np.arange(logits.shape[0]), labels]
    out = lse - picked
    return out if a.ndim == 2 else out.reshape(())


def _fwd_mse(a, b, attrs):
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = a - b
    return np.asarray((d * d).mean())


_SCRATCH = threading.local()


def _scratch(key: tuple, shape: tuple) -> np.ndarray:
    """Reusable per-thread work buffer; contents are consumed immediately
    by the caller, never stored on graph nodes."""
    pool = getattr(_SCRATCH, "pool", None)
    if pool is None:
        pool = _SCRATCH.pool = {}
    buf = pool.get(key)
    if buf is None or buf.shape != shape:
        buf = pool[key] = np.empty(shape)
    return buf


def _im2col(x, kh, kw):
    # x [N,C,H,W] -> scratch col [N, Ho, Wo, C, kh, kw] (patch-major rows)
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    col = _scratch(("col", n, c, h, w, kh, kw), (n, ho, wo, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            col[:, :, :, :, i, j] = x[:, :, i:i + ho, j:j + wo].transpose(0, 2, 3, 1)
    return col, ho, wo


def _channels_last(g):
    # [N,Co,Ho,Wo] -> scratch [N*Ho*Wo, Co]
    n, co, ho, wo = g.shape
    buf = _scratch(("chl", n, co, ho, wo), (n, ho, wo, co))
    np.copyto(buf, g.transpose(0, 2, 3, 1))
    return buf.reshape(n * ho * wo, co)


def _fwd_conv2d(x, w, attrs):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: channel mismatch, input {c} vs kernel {ci}")
    if kh > h or kw > wd:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    col, ho, wo = _im2col(x, kh, kw)
    out = _scratch(("convo", n, co, ho, wo), (n * ho * wo, co))
    np.matmul(col.reshape(n * ho * wo, -1), w.reshape(co, ci * kh * kw).T, out=out)
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def _fwd_conv2d_input_grad(g, w, attrs):
    # adjoint of conv2d w.r.t. its input: one gemm, then window accumulation
    n, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    h, wd = ho + kh - 1, wo + kw - 1
    g2 = _channels_last(g)
    gcol = _scratch(("gcol", n, ci, ho, wo, kh, kw), (n * ho * wo, ci * kh * kw))
    np.matmul(g2, w.reshape(co, ci * kh * kw), out=gcol)
    gcol = gcol.reshape(n, ho, wo, ci, kh, kw)
    gx = np.zeros((n, ci, h, wd))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + ho, j:j + wo] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gx


def _fwd_conv2d_weight_grad(x, g, attrs):
    # adjoint of conv2d w.r.t. its kernel
    kh, kw = attrs["kh"], attrs["kw"]
    n, c, h, w = x.shape
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    col, _, _ = _im2col(x, kh, kw)
    g2 = _channels_last(g)
    gw = g2.T @ col.reshape(n * ho * wo, -1)             # [Co, C*kh*kw]
    return gw.reshape(co, c, kh, kw)


def _fwd_avgpool2d(x, attrs):
    k = attrs["k"]
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims {h}x{w} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


_FORWARD = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scale": _fwd_scale,
    "matmul": _fwd_matmul,
    "conv2d": _fwd_conv2d,
    "conv2d-input-grad": _fwd_conv2d_input_grad,
    "conv2d-weight-grad": _fwd_conv2d_weight_grad,
    "relu": _fwd_relu,
    "sigmoid": _fwd_sigmoid,
    "avgpool2d": _fwd_avgpool2d,
    "reshape": _fwd_reshape,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "max-over-axis": _fwd_max_over_axis,
    "softmax": _fwd_softmax,
    "softmax-cross-entropy": _fwd_softmax_cross_entropy,
    "mse": _fwd_mse,
    "gather-rows": _fwd_gather_rows,
    "scatter-rows": _fwd_scatter_rows,
}


# ---------------------------------------------------------------------------
# public ops

def _broadcast_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_check("add", a.data, b.data)
    return _emit("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_check("sub", a.data, b.data)
    return _emit("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_check("mul", a.data, b.data)
    return _emit("mul", (a, b), a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    a = _coerce(a)
    attrs = {"c": float(c)}
    return _emit("scale", (a,), _fwd_scale(a.data, attrs), attrs)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    attrs = {"ta": transpose_a, "tb": transpose_b}
    return _emit("matmul", (a, b), _fwd_matmul(a.data, b.data, attrs), attrs)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    x, w = _coerce(x), _coerce(w)
    return _emit("conv2d", (x, w), _fwd_conv2d(x.data, w.data, None))


def conv2d_input_grad(g: Tensor, w: Tensor) -> Tensor:
    g, w = _coerce(g), _coerce(w)
    return _emit("conv2d-input-grad", (g, w), _fwd_conv2d_input_grad(g.data, w.data, None))


def conv2d_weight_grad(x: Tensor, g: Tensor, kh: int, kw: int) -> Tensor:
    x, g = _coerce(x), _coerce(g)
    attrs = {"kh": kh, "kw": kw}
    return _emit("conv2d-weight-grad", (x, g), _fwd_conv2d_weight_grad(x.data, g.data, attrs), attrs)


def relu(x: Tensor) -> Tensor:
    x = _coerce(x)
    return _emit("relu", (x,), _fwd_relu(x.data, None))


def sigmoid(x: Tensor) -> Tensor:
    x = _coerce(x)
    return _emit("sigmoid", (x,), _fwd_sigmoid(x.data, None))


def avgpool2d(x: Tensor, k: int) -> Tensor:
    x = _coerce(x)
    attrs = {"k": int(k)}
    return _emit("avgpool2d", (x,), _fwd_avgpool2d(x.data, attrs), attrs)


def reshape(x: Tensor, shape) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    attrs = {"shape": shape}
    return _emit("reshape", (x,), x.data.reshape(shape), attrs)


def _norm_axis(axis):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis,)
    return tuple(int(a) for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - op name fixed
    x = _coerce(x)
    attrs = {"axis": _norm_axis(axis), "keepdims": keepdims}
    return _emit("sum", (x,), _fwd_sum(x.data, attrs), attrs)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    attrs = {"axis": _norm_axis(axis), "keepdims": keepdims}
    return _emit("mean", (x,), _fwd_mean(x.data, attrs), attrs)


def max_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    attrs = {"axis": int(axis), "keepdims": keepdims}
    return _emit("max-over-axis", (x,), _fwd_max_over_axis(x.data, attrs), attrs)


def softmax(x: Tensor) -> Tensor:
    x = _coerce(x)
    return _emit("softmax", (x,), _fwd_softmax(x.data, None))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy of softmax(logits) against integer labels."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim not in (1, 2):
        raise ShapeError(f"softmax-cross-entropy: logits must be 1-D or 2-D, got {logits.shape}")
    k = logits.shape[-1]
    if labels.ndim == 0:
        labels = labels.reshape(1)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ShapeError(f"softmax-cross-entropy: label out of range for {k} classes")
    attrs = {"labels": labels}
    return _emit("softmax-cross-entropy", (logits,), _fwd_softmax_cross_entropy(logits.data, attrs), attrs)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = _coerce(pred), _coerce(target)
    return _emit("mse", (pred, target), _fwd_mse(pred.data, target.data, None))


def gather_rows(x: Tensor, index) -> Tensor:
    x = _coerce(x)
    index = np.asarray(index, dtype=np.int64)
    if np.any(index < 0) or np.any(index >= x.shape[0]):
        raise ShapeError("gather-rows: index out of range")
    attrs = {"index": index}
    return _emit("gather-rows", (x,), _fwd_gather_rows(x.data, attrs), attrs)


def scatter_rows(x: Tensor, index, n_rows: int) -> Tensor:
    x = _coerce(x)
    attrs = {"index": np.asarray(index, dtype=np.int64), "n_rows": int(n_rows)}
    return _emit("scatter-rows", (x,), _fwd_scatter_rows(x.data, attrs), attrs)


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule receives the node's inputs and output wrapped as Tensors (tracked
# when build_graph is on) plus the upstream gradient, and returns one gradient
# per input (None where an input is not differentiable). Rules only use the
# public ops above, which is what makes gradients differentiable again.

def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum g down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    g = sum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


def _bwd_add(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_sub(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)


def _bwd_mul(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


def _bwd_scale(inputs, out, g, attrs):
    return (scale(g, attrs["c"]),)


def _bwd_matmul(inputs, out, g, attrs):
    a, b = inputs
    ta, tb = attrs["ta"], attrs["tb"]
    if not ta and not tb:
        return matmul(g, b, transpose_b=True), matmul(a, g, transpose_a=True)
    if ta and not tb:
        return matmul(b, g, transpose_b=True), matmul(a, g)
    if not ta and tb:
        return matmul(g, b), matmul(g, a, transpose_a=True)
    return (
        matmul(b, g, transpose_a=True, transpose_b=True),
        matmul(g, a, transpose_a=True, transpose_b=True),
    )


def _bwd_conv2d(inputs, out, g, attrs):
    x, w = inputs
    kh, kw = w.shape[2], w.shape[3]
    return conv2d_input_grad(g, w), conv2d_weight_grad(x, g, kh, kw)


def _bwd_conv2d_input_grad(inputs, out, g, attrs):
    # out = D(gy, w); <u, D(gy, w)> = <gy, C(u, w)>
    gy, w = inputs
    kh, kw = w.shape[2], w.shape[3]
    return conv2d(g, w), conv2d_weight_grad(g, gy, kh, kw)


def _bwd_conv2d_weight_grad(inputs, out, g, attrs):
    # out = E(x, gy); <u, E(x, gy)> = <gy, C(x, u)>
    x, gy = inputs
    return conv2d_input_grad(gy, g), conv2d(x, g)


def _bwd_relu(inputs, out, g, attrs):
    mask = Tensor((inputs[0].data > 0).astype(np.float64))
    return (mul(g, mask),)


def _bwd_sigmoid(inputs, out, g, attrs):
    one = Tensor(np.ones_like(out.data))
    return (mul(g, mul(out, sub(one, out))),)


def _bwd_avgpool2d(inputs, out, g, attrs):
    k = attrs["k"]
    n, c, ho, wo = out.shape
    up = reshape(g, (n, c, ho, 1, wo, 1))
    up = mul(up, Tensor(np.ones((1, 1, 1, k, 1, k))))
    return (scale(reshape(up, inputs[0].shape), 1.0 / (k * k)),)


def _bwd_reshape(inputs, out, g, attrs):
    return (reshape(g, inputs[0].shape),)


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axis = tuple(a % len(shape) for a in axis)
    return tuple(1 if i in axis else s for i, s in enumerate(shape))


def _bwd_sum(inputs, out, g, attrs):
    x = inputs[0]
    if not attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(x.shape, attrs["axis"]))
    return (mul(g, Tensor(np.ones(x.shape))),)


def _bwd_mean(inputs, out, g, attrs):
    x = inputs[0]
    count = x.size // max(out.size, 1)
    if not attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(x.shape, attrs["axis"]))
    return (scale(mul(g, Tensor(np.ones(x.shape))), 1.0 / count),)


def _bwd_max_over_axis(inputs, out, g, attrs):
    x = inputs[0]
    axis = attrs["axis"]
    # subgradient: all of g goes to the first argmax along the axis
    idx = np.argmax(x.data, axis=axis)
    mask = np.zeros(x.shape)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    if not attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(x.shape, (axis,)))
    return (mul(g, Tensor(mask)),)


def _bwd_softmax(inputs, out, g, attrs):
    # d<u, softmax(x)>/dx = p * (u - sum(p * u))
    inner = sum(mul(out, g), axis=-1, keepdims=True)
    return (mul(out, sub(g, inner)),)


def _bwd_softmax_cross_entropy(inputs, out, g, attrs):
    logits = inputs[0]
    labels = attrs["labels"]
    flat = logits.data.ndim == 1
    x = reshape(logits, (1, -1)) if flat else logits
    onehot = np.zeros(x.shape)
    onehot[np.arange(x.shape[0]), labels] = 1.0
    diff = sub(softmax(x), Tensor(onehot))
    gm = reshape(g, (x.shape[0], 1))
    gx = mul(gm, diff)
    return (reshape(gx, logits.shape) if flat else gx,)


def _bwd_mse(inputs, out, g, attrs):
    a, b = inputs
    ga = mul(scale(sub(a, b), 2.0 / a.size), g)
    return ga, scale(ga, -1.0)


def _bwd_gather_rows(inputs, out, g, attrs):
    return (scatter_rows(g, attrs["index"], inputs[0].shape[0]),)


def _bwd_scatter_rows(inputs, out, g, attrs):
    return (gather_rows(g, attrs["index"]),)


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "matmul": _bwd_matmul,
    "conv2d": _bwd_conv2d,
    "conv2d-input-grad": _bwd_conv2d_input_grad,
    "conv2d-weight-grad": _bwd_conv2d_weight_grad,
    "relu": _bwd_relu,
    "sigmoid": _bwd_sigmoid,
    "avgpool2d": _bwd_avgpool2d,
    "reshape": _bwd_reshape,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "max-over-axis": _bwd_max_over_axis,
    "softmax": _bwd_softmax,
    "softmax-cross-entropy": _bwd_softmax_cross_entropy,
    "mse": _bwd_mse,
    "gather-rows": _bwd_gather_rows,
    "scatter-rows": _bwd_scatter_rows,
}


# ---------------------------------------------------------------------------
# graph-level entry points

def _node_id(graph: Graph, ref) -> int:
    if isinstance(ref, Tensor):
        if ref.graph is not graph:
            raise GraphError("tensor does not belong to this graph")
        return ref.node
    return int(ref)


def forward(graph: Graph, root) -> Tensor:
    """Replay the recorded ops from the leaves and return the root's value.

    Leaves keep their bound values; every other node is recomputed, which
    makes this a determinism check as much as an evaluator. Raises
    NonFiniteError naming the first node whose output is not finite.
    """
    root_id = _node_id(graph, root)
    values: list[np.ndarray | None] = [None] * (root_id + 1)
    for i in range(root_id + 1):
        node = graph.nodes[i]
        if node.kind == "leaf":
            values[i] = node.value
        else:
            args = [values[j] for j in node.inputs]
            values[i] = _FORWARD[node.kind](*args, node.attrs)
        if not np.all(np.isfinite(values[i])):
            raise NonFiniteError(f"node {i} ({node.kind}) produced a non-finite value")
    return Tensor(values[root_id], graph, root_id)


def backward(graph: Graph, root, wrt, build_graph: bool = False) -> dict[int, Tensor]:
    """Gradients of a scalar root w.r.t. the given nodes.

    Returns a map node-id -> gradient Tensor. Nodes the root does not
    depend on get a zero tensor of their shape. With ``build_graph=True``
    the returned gradients are recorded on the same graph and can be
    differentiated again.
    """
    root_id = _node_id(graph, root)
    wrt_ids = [_node_id(graph, w) for w in (wrt if isinstance(wrt, (list, tuple, set)) else [wrt])]
    root_node = graph.nodes[root_id]
    if root_node.value.size != 1:
        raise GraphError(f"backward: root node {root_id} is not scalar (shape {root_node.value.shape})")

    wrt_set = set(wrt_ids)
    needed = np.zeros(root_id + 1, dtype=bool)
    for i in range(root_id + 1):
        node = graph.nodes[i]
        needed[i] = i in wrt_set or any(needed[j] for j in node.inputs)

    def wrap(i: int) -> Tensor:
        v = graph.nodes[i].value
        return Tensor(v, graph, i) if build_graph else Tensor(v)

    grads: dict[int, Tensor] = {}
    seed = np.ones_like(root_node.value)
    grads[root_id] = graph.constant(seed) if build_graph else Tensor(seed)

    for i in range(root_id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in wrt_set:
            grads[i] = g          # keep; a wrt node may also feed other nodes
        node = graph.nodes[i]
        if node.kind == "leaf" or not any(needed[j] for j in node.inputs):
            continue
        contribs = _BACKWARD[node.kind]([wrap(j) for j in node.inputs], wrap(i), g, node.attrs)
        for j, c in zip(node.inputs, contribs):
            if c is None or not needed[j]:
                continue
            held = grads.get(j)
            grads[j] = c if held is None else add(held, c)

    out = {}
    for i in wrt_ids:
        got = grads.get(i)
        if got is None:
            z = np.zeros_like(graph.nodes[i].value)
            got = graph.constant(z) if build_graph else Tensor(z)
        out[i] = got
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    analytic: np.ndarray
    numeric_shape: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(fn, point, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences, elementwise.

    ``fn`` maps one Tensor to a scalar Tensor and must work on untracked
    tensors too (all ops do). The relative error is
    |a - n| / max(|a|, |n|, 1), i.e. absolute for small gradients.
    """
    point = _as_f64(point)
    g = Graph()
    x = g.leaf(point)
    y = fn(x)
    if y.size != 1:
        raise GraphError("grad_check: fn must be scalar-valued")
    analytic = backward(g, y, [x])[x.node].data

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = fn(Tensor((flat + bump).reshape(point.shape))).item()
        lo = fn(Tensor((flat - bump).reshape(point.shape))).item()
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel, tol, analytic, numeric.shape)
