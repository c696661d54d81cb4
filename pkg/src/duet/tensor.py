"""Static computation graphs over float64 numpy arrays with reverse-mode autodiff.

A :class:`Graph` is built once from leaves (parameters, inputs, noise draws)
and primitive ops, then evaluated any number of times against different
bindings.  Tensors are plain ``numpy.ndarray`` objects of dtype float64.
Convolutional feature maps are laid out channel-major, (C, N, H, W), and
kernels as (C_out, C_in, kh, kw).

Example::

    g = Graph()
    x = g.leaf("x")
    loss = g.mean(x * x)
    grads = gradients(g, loss, [x], {x: np.array([1.0, 2.0])})
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when a node receives inputs of incompatible shapes."""


class Node:
    """A handle to one value in a :class:`Graph`."""

    __slots__ = ("graph", "index", "op", "inputs", "attrs", "name")

    def __init__(self, graph: "Graph", index: int, op: str, inputs: tuple, attrs: dict, name: str):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    def __repr__(self) -> str:
        return f"Node({self.name!r}, op={self.op})"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other: object) -> bool:
        return self is other

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


# ---------------------------------------------------------------------------
# primitive kernels: forward(inputs, attrs) -> (value, saved); backward(g, inputs, value, saved, attrs) -> grads


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _add_fwd(ins, attrs):
    _check_broadcast(*ins)
    return ins[0] + ins[1], None


def _add_bwd(g, ins, out, saved, attrs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _sub_fwd(ins, attrs):
    _check_broadcast(*ins)
    return ins[0] - ins[1], None


def _sub_bwd(g, ins, out, saved, attrs):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)]


def _mul_fwd(ins, attrs):
    _check_broadcast(*ins)
    return ins[0] * ins[1], None


def _mul_bwd(g, ins, out, saved, attrs):
    a, b = ins
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _div_fwd(ins, attrs):
    _check_broadcast(*ins)
    return ins[0] / ins[1], None


def _div_bwd(g, ins, out, saved, attrs):
    a, b = ins
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


def _neg_fwd(ins, attrs):
    return -ins[0], None


def _neg_bwd(g, ins, out, saved, attrs):
    return [-g]


def _matmul_fwd(ins, attrs):
    a, b = ins
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape}@{b.shape}")
    return a @ b, None


def _matmul_bwd(g, ins, out, saved, attrs):
    a, b = ins
    return [g @ b.T, a.T @ g]


def _conv_geometry(x: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs CNHW input and OCkk kernel, got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {w.shape[1]}")
    c, n, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
    return c, n, h, wd, kh, kw, ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    c, n = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(c, n * ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _conv2d_fwd(ins, attrs):
    # channel-major layout (C, N, H, W) keeps both GEMMs copy-free
    x, w = ins
    s, p, d = attrs["stride"], attrs["padding"], attrs["dilation"]
    c, n, h, wd, kh, kw, ho, wo = _conv_geometry(x, w, s, p, d)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, kh, kw, ho, wo, s, d)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(w.shape[0], n, ho, wo), cols


def _conv2d_bwd(g, ins, out, cols, attrs, needs=(True, True)):
    x, w = ins
    s, p, d = attrs["stride"], attrs["padding"], attrs["dilation"]
    c, n, h, wd, kh, kw, ho, wo = _conv_geometry(x, w, s, p, d)
    o = w.shape[0]
    g2 = g.reshape(o, n * ho * wo)
    gw = (g2 @ cols.T).reshape(w.shape) if needs[1] else None
    if not needs[0]:
        return [None, gw]
    if s == 1 and kh == kw and 2 * p == d * (kh - 1):
        # "same" stride-1 conv: input gradient is a conv of g with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv2d_fwd([g, wt], attrs)
        return [gx, gw]
    dcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * p, wd + 2 * p))
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            gxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[:, i, j]
    gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    return [gx, gw]


def _relu_fwd(ins, attrs):
    return np.maximum(ins[0], 0.0), None


def _relu_bwd(g, ins, out, saved, attrs):
    return [g * (ins[0] > 0)]


def _sigmoid_fwd(ins, attrs):
    x = ins[0]
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None


def _sigmoid_bwd(g, ins, out, saved, attrs):
    return [g * out * (1.0 - out)]


def _softplus_fwd(ins, attrs):
    x = ins[0]
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), None


def _softplus_bwd(g, ins, out, saved, attrs):
    return [g * _sigmoid_fwd(ins, attrs)[0]]


def _log_fwd(ins, attrs):
    return np.log(ins[0]), None


def _log_bwd(g, ins, out, saved, attrs):
    return [g / ins[0]]


def _exp_fwd(ins, attrs):
    return np.exp(ins[0]), None


def _exp_bwd(g, ins, out, saved, attrs):
    return [g * out]


def _clamp_fwd(ins, attrs):
    return np.clip(ins[0], attrs["lo"], attrs["hi"]), None


def _clamp_bwd(g, ins, out, saved, attrs):
    x = ins[0]
    return [g * ((x >= attrs["lo"]) & (x <= attrs["hi"]))]


def _upsample2x_fwd(ins, attrs):
    x = ins[0]
    if x.ndim != 4:
        raise ShapeError(f"upsample2x needs a 4-d (C, N, H, W) input, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def _upsample2x_bwd(g, ins, out, saved, attrs):
    c, n, h, w = ins[0].shape
    return [g.reshape(c, n, h, 2, w, 2).sum(axis=(3, 5))]


def _reduce_fwd(kind):
    def fwd(ins, attrs):
        x = ins[0]
        fn = np.mean if kind == "mean" else np.sum
        return np.asarray(fn(x, axis=attrs["axis"], keepdims=attrs["keepdims"]), dtype=np.float64), None

    return fwd


def _reduce_bwd(kind):
    def bwd(g, ins, out, saved, attrs):
        x = ins[0]
        axis = attrs["axis"]
        if axis is None:
            axes = tuple(range(x.ndim))
        else:
            axes = tuple(a % x.ndim for a in (axis if isinstance(axis, tuple) else (axis,)))
        if not attrs["keepdims"]:
            g = np.expand_dims(g, axes)
        count = int(np.prod([x.shape[a] for a in axes])) if kind == "mean" else 1
        return [np.broadcast_to(g / count, x.shape).copy()]

    return bwd


def _logsumexp_fwd(ins, attrs):
    x = ins[0]
    ax = attrs["axis"]
    m = np.max(x, axis=ax, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=ax, keepdims=True))
    return np.squeeze(out, axis=ax), None


def _logsumexp_bwd(g, ins, out, saved, attrs):
    ax = attrs["axis"]
    x = ins[0]
    soft = np.exp(x - np.expand_dims(out, ax))
    return [np.expand_dims(g, ax) * soft]


def _logaddexp_fwd(ins, attrs):
    _check_broadcast(*ins)
    return np.logaddexp(ins[0], ins[1]), None


def _logaddexp_bwd(g, ins, out, saved, attrs):
    a, b = ins
    return [_unbroadcast(g * np.exp(a - out), a.shape), _unbroadcast(g * np.exp(b - out), b.shape)]


def _concat_fwd(ins, attrs):
    ax = attrs["axis"]
    ref = ins[0].shape
    for t in ins[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax % len(ref)):
            raise ShapeError(f"concat along axis {ax}: incompatible shapes {[t.shape for t in ins]}")
    return np.concatenate(ins, axis=ax), None


def _concat_bwd(g, ins, out, saved, attrs):
    ax = attrs["axis"]
    cuts = np.cumsum([t.shape[ax] for t in ins])[:-1]
    return list(np.split(g, cuts, axis=ax))


def _reshape_fwd(ins, attrs):
    try:
        return ins[0].reshape(attrs["shape"]), None
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _reshape_bwd(g, ins, out, saved, attrs):
    return [g.reshape(ins[0].shape)]


def _transpose_fwd(ins, attrs):
    return np.transpose(ins[0], attrs["axes"]), None


def _transpose_bwd(g, ins, out, saved, attrs):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


@dataclass(frozen=True)
class _Primitive:
    forward: Callable[..., Any]
    backward: Callable[..., Any]


PRIMITIVES: dict[str, _Primitive] = {
    "add": _Primitive(_add_fwd, _add_bwd),
    "sub": _Primitive(_sub_fwd, _sub_bwd),
    "mul": _Primitive(_mul_fwd, _mul_bwd),
    "div": _Primitive(_div_fwd, _div_bwd),
    "neg": _Primitive(_neg_fwd, _neg_bwd),
    "matmul": _Primitive(_matmul_fwd, _matmul_bwd),
    "conv2d": _Primitive(_conv2d_fwd, _conv2d_bwd),
    "relu": _Primitive(_relu_fwd, _relu_bwd),
    "sigmoid": _Primitive(_sigmoid_fwd, _sigmoid_bwd),
    "softplus": _Primitive(_softplus_fwd, _softplus_bwd),
    "log": _Primitive(_log_fwd, _log_bwd),
    "exp": _Primitive(_exp_fwd, _exp_bwd),
    "clamp": _Primitive(_clamp_fwd, _clamp_bwd),
    "upsample2x": _Primitive(_upsample2x_fwd, _upsample2x_bwd),
    "mean": _Primitive(_reduce_fwd("mean"), _reduce_bwd("mean")),
    "sum": _Primitive(_reduce_fwd("sum"), _reduce_bwd("sum")),
    "logsumexp": _Primitive(_logsumexp_fwd, _logsumexp_bwd),
    "logaddexp": _Primitive(_logaddexp_fwd, _logaddexp_bwd),
    "concat": _Primitive(_concat_fwd, _concat_bwd),
    "reshape": _Primitive(_reshape_fwd, _reshape_bwd),
    "transpose": _Primitive(_transpose_fwd, _transpose_bwd),
}


@dataclass
class Graph:
    """An append-only DAG; node creation order is a valid topological order."""

    nodes: list[Node] = field(default_factory=list)
    constants: dict[int, np.ndarray] = field(default_factory=dict)

    def _node(self, op: str, inputs: Iterable[Node], name: str | None = None, **attrs) -> Node:
        inputs = tuple(inputs)
        for n in inputs:
            if not isinstance(n, Node) or n.graph is not self:
                raise ValueError(f"{op}: input {n!r} does not belong to this graph")
        idx = len(self.nodes)
        node = Node(self, idx, op, inputs, attrs, name or f"{op}_{idx}")
        self.nodes.append(node)
        return node

    # leaves
    def leaf(self, name: str) -> Node:
        return self._node("leaf", (), name)

    def constant(self, value, name: str | None = None) -> Node:
        node = self._node("const", (), name)
        self.constants[node.index] = np.asarray(value, dtype=np.float64)
        return node

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "leaf"]

    # ops
    def add(self, a, b, name=None):
        return self._node("add", (a, b), name)

    def sub(self, a, b, name=None):
        return self._node("sub", (a, b), name)

    def mul(self, a, b, name=None):
        return self._node("mul", (a, b), name)

    def div(self, a, b, name=None):
        return self._node("div", (a, b), name)

    def neg(self, a, name=None):
        return self._node("neg", (a,), name)

    def matmul(self, a, b, name=None):
        return self._node("matmul", (a, b), name)

    def conv2d(self, x, w, stride: int = 1, padding: int = 0, dilation: int = 1, name=None):
        if stride not in (1, 2):
            raise ValueError("conv2d supports stride 1 or 2")
        return self._node("conv2d", (x, w), name, stride=stride, padding=padding, dilation=dilation)

    def relu(self, x, name=None):
        return self._node("relu", (x,), name)

    def sigmoid(self, x, name=None):
        return self._node("sigmoid", (x,), name)

    def softplus(self, x, name=None):
        return self._node("softplus", (x,), name)

    def log(self, x, name=None):
        return self._node("log", (x,), name)

    def exp(self, x, name=None):
        return self._node("exp", (x,), name)

    def clamp(self, x, lo: float, hi: float, name=None):
        return self._node("clamp", (x,), name, lo=lo, hi=hi)

    def upsample2x(self, x, name=None):
        return self._node("upsample2x", (x,), name)

    def mean(self, x, axis=None, keepdims: bool = False, name=None):
        return self._node("mean", (x,), name, axis=axis, keepdims=keepdims)

    def sum(self, x, axis=None, keepdims: bool = False, name=None):
        return self._node("sum", (x,), name, axis=axis, keepdims=keepdims)

    def logsumexp(self, x, axis: int = -1, name=None):
        return self._node("logsumexp", (x,), name, axis=axis)

    def logaddexp(self, a, b, name=None):
        return self._node("logaddexp", (a, b), name)

    def concat(self, xs, axis: int = 1, name=None):
        return self._node("concat", tuple(xs), name, axis=axis)

    def reshape(self, x, shape, name=None):
        return self._node("reshape", (x,), name, shape=tuple(shape))

    def transpose(self, x, axes, name=None):
        return self._node("transpose", (x,), name, axes=tuple(axes))


def _evaluate(graph: Graph, bindings: Mapping[Node, Any], upto: int | None = None):
    last = len(graph.nodes) if upto is None else upto + 1
    values: list[np.ndarray | None] = [None] * last
    saved: list[Any] = [None] * last
    for node in graph.nodes[:last]:
        if node.op == "leaf":
            if node not in bindings:
                raise KeyError(f"leaf {node.name!r} is not bound")
            values[node.index] = np.asarray(bindings[node], dtype=np.float64)
            continue
        if node.op == "const":
            values[node.index] = graph.constants[node.index]
            continue
        ins = [values[i.index] for i in node.inputs]
        try:
            values[node.index], saved[node.index] = PRIMITIVES[node.op].forward(ins, node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {node.name!r} ({node.op}): {exc}") from None
    return values, saved


def forward(graph: Graph, bindings: Mapping[Node, Any]) -> dict[Node, np.ndarray]:
    """Evaluate every node of ``graph`` given values for all of its leaves."""
    values, _ = _evaluate(graph, bindings)
    return {node: values[node.index] for node in graph.nodes}


def evaluate(graph: Graph, bindings: Mapping[Node, Any], outputs: Iterable[Node]) -> list[np.ndarray]:
    """Evaluate only as far as the latest requested output."""
    outputs = list(outputs)
    values, _ = _evaluate(graph, bindings, upto=max(n.index for n in outputs))
    return [values[n.index] for n in outputs]


def gradients(
    graph: Graph,
    loss: Node,
    wrt: Iterable[Node],
    bindings: Mapping[Node, Any],
    return_values: bool = False,
):
    """Reverse-mode derivatives of the scalar ``loss`` with respect to ``wrt``.

    Leaves that ``loss`` does not depend on get a zero gradient.  With
    ``return_values=True`` the forward values are returned as well, as a
    ``(grads, values)`` pair where ``values`` is indexed by node.
    """
    wrt = list(wrt)
    values, saved = _evaluate(graph, bindings, upto=loss.index)
    if values[loss.index].size != 1:
        raise ShapeError(f"loss node {loss.name!r} is not scalar: shape {values[loss.index].shape}")
    # only propagate into nodes that lead to a requested leaf
    needed = [False] * (loss.index + 1)
    for leaf in wrt:
        if leaf.index <= loss.index:
            needed[leaf.index] = True
    for node in graph.nodes[: loss.index + 1]:
        if not needed[node.index] and any(needed[i.index] for i in node.inputs):
            needed[node.index] = True
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(values[loss.index])
    for node in reversed(graph.nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.op in ("leaf", "const"):
            continue
        ins = [values[i.index] for i in node.inputs]
        prim = PRIMITIVES[node.op]
        if node.op == "conv2d":
            needs = tuple(needed[i.index] for i in node.inputs)
            in_grads = prim.backward(g, ins, values[node.index], saved[node.index], node.attrs, needs)
        else:
            in_grads = prim.backward(g, ins, values[node.index], saved[node.index], node.attrs)
        for parent, pg in zip(node.inputs, in_grads):
            if not needed[parent.index] or pg is None:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = pg
            else:
                grads[parent.index] = grads[parent.index] + pg
    out = {}
    for leaf in wrt:
        g = grads[leaf.index] if leaf.index < len(grads) else None
        if g is None:
            if leaf.index < len(values) and values[leaf.index] is not None:
                g = np.zeros_like(values[leaf.index])
            else:
                g = np.zeros_like(np.asarray(bindings[leaf], dtype=np.float64))
        out[leaf] = g
    if return_values:
        return out, values
    return out


# ---------------------------------------------------------------------------
# DTF1 binary tensor files

_MAGIC = b"DTF1"


def encode_dtf(t) -> bytes:
    arr = np.asarray(t, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_dtf(buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError("not a DTF1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    start = 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - start != 8 * count:
        raise ValueError(f"DTF1 payload has {len(buf) - start} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=start, count=count).astype(np.float64).reshape(dims)


def save_dtf(path: str | Path, t) -> None:
    Path(path).write_bytes(encode_dtf(t))


def load_dtf(path: str | Path) -> np.ndarray:
    return decode_dtf(Path(path).read_bytes())
