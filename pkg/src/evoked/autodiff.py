"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every network in the package is expressed with the primitives registered
here. A forward pass builds a fresh graph of :class:`Node` objects;
:func:`backward` walks it in reverse topological order and accumulates
gradients into ``Node.grad``.

    >>> x = Parameter("x", np.array([-1.0, 2.0]))
    >>> loss = apply_primitive("reduce_sum", [apply_primitive("relu", [x.node])])
    >>> backward(loss)
    >>> x.grad
    array([0., 1.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An input shape is invalid for the primitive it was passed to."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""


class Tensor:
    """Immutable float64 array with a validated shape.

    Construction copies the data, rejects non-finite values and marks the
    buffer read-only. ``Tensor.wrap`` skips both for values the tape
    produced itself.
    """

    __slots__ = ("data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ShapeError(f"dimension sizes must be positive, got {shape}")
            if int(np.prod(shape)) != arr.size:
                raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """One value on the tape, plus the bookkeeping needed to differentiate it."""

    __slots__ = ("op", "inputs", "attrs", "value", "grad", "cache")

    def __init__(self, op: str, inputs: Sequence["Node"], value: np.ndarray, attrs=None, cache=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.value = value
        self.grad: np.ndarray | None = None
        self.cache = cache

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        return Tensor.wrap(self.value)

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"


# TapeNode is the name used for graph vertices in the API docs.
TapeNode = Node


class Parameter:
    """A named, trainable leaf.

    ``value`` is updated in place by the optimizer, so a graph built before an
    update must not be reused after it.
    """

    __slots__ = ("name", "node", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        value = Tensor(value).data.copy()
        self.name = name
        self.node = Node("param", (), value)
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> np.ndarray | None:
        return self.node.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.node.value.shape

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shape:
            raise ShapeError(f"parameter {self.name!r} has shape {self.shape}, got {value.shape}")
        self.node.value[...] = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(value) -> Node:
    """Leaf node that never receives a gradient that matters to anyone."""
    return Node("const", (), Tensor(value).data)


# ---------------------------------------------------------------------------
# primitives
#
# Each entry is (forward, backward). forward(values, attrs) returns
# (output, cache); backward(grad_out, values, output, cache, attrs) returns one
# gradient (or None) per input.

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(name):
    def register(cls):
        _PRIMITIVES[name] = (cls.forward, cls.backward)
        return cls
    return register


def _fail(op, msg):
    raise ShapeError(f"{op}: {msg}")


@primitive("linear")
class _Linear:
    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        if w.ndim != 2:
            _fail("linear", f"weight must be 2-d, got shape {w.shape}")
        if x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
            _fail("linear", f"input last dim {x.shape} does not match weight rows {w.shape[0]}")
        out = x @ w
        if len(vals) == 3:
            b = vals[2]
            if b.shape != (w.shape[1],):
                _fail("linear", f"bias shape {b.shape} != ({w.shape[1]},)")
            out = out + b
        return out, None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x, w = vals[0], vals[1]
        gx = g @ w.T
        if x.ndim == 1:
            gw = np.outer(x, g)
        else:
            gw = x.T @ g
        grads = [gx, gw]
        if len(vals) == 3:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(vals, attrs):
        return np.maximum(vals[0], 0.0), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        # subgradient 0 at the kink
        return [g * (vals[0] > 0.0)]


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [g * out * (1.0 - out)]


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(vals, attrs):
        axis = attrs.get("axis", -1)
        ref = vals[0]
        ax = axis % ref.ndim
        for v in vals[1:]:
            if v.ndim != ref.ndim or any(a != b for i, (a, b) in enumerate(zip(v.shape, ref.shape)) if i != ax):
                _fail("concat", f"shapes {ref.shape} and {v.shape} differ outside axis {axis}")
        sizes = [v.shape[ax] for v in vals]
        return np.concatenate(vals, axis=ax), (ax, sizes)

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        ax, sizes = cache
        return np.split(g, np.cumsum(sizes)[:-1], axis=ax)


@primitive("embedding")
class _Embedding:
    """Row lookup; ``attrs["ids"]`` is an integer array of any shape."""

    @staticmethod
    def forward(vals, attrs):
        table = vals[0]
        ids = np.asarray(attrs["ids"])
        if table.ndim != 2:
            _fail("embedding", f"table must be 2-d, got {table.shape}")
        if ids.dtype.kind not in "iu":
            _fail("embedding", f"ids must be integers, got dtype {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            _fail("embedding", f"ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]")
        return table[ids], None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        table = vals[0]
        ids = np.asarray(attrs["ids"]).reshape(-1)
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g.reshape(-1, table.shape[1]))
        return [gt]


@primitive("conv1d")
class _Conv1d:
    """Valid 1-d convolution over (batch, length, channels).

    inputs: x (B, L, Cin), kernel (k, Cin, Cout), optional bias (Cout,).
    output length is floor((L - k) / stride) + 1.
    """

    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        stride = int(attrs.get("stride", 1))
        if x.ndim != 3 or w.ndim != 3:
            _fail("conv1d", f"expected x (B, L, C) and kernel (k, Cin, Cout), got {x.shape} and {w.shape}")
        k, cin, cout = w.shape
        if x.shape[2] != cin:
            _fail("conv1d", f"input channels {x.shape[2]} != kernel input channels {cin}")
        length = x.shape[1]
        if length < k:
            _fail("conv1d", f"input length {length} shorter than kernel width {k}")
        lout = (length - k) // stride + 1
        # cols[b, t, j, c] = x[b, t*stride + j, c]
        idx = np.arange(lout)[:, None] * stride + np.arange(k)[None, :]
        cols = x[:, idx, :].reshape(x.shape[0], lout, k * cin)
        out = cols @ w.reshape(k * cin, cout)
        if len(vals) == 3:
            if vals[2].shape != (cout,):
                _fail("conv1d", f"bias shape {vals[2].shape} != ({cout},)")
            out = out + vals[2]
        return out, (cols, idx)

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x, w = vals[0], vals[1]
        cols, idx = cache
        k, cin, cout = w.shape
        bsz, lout, _ = g.shape
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(w.shape)
        gcols = (g2 @ w.reshape(k * cin, cout).T).reshape(bsz, lout, k, cin)
        gx = np.zeros_like(x)
        for j in range(k):
            np.add.at(gx, (slice(None), idx[:, j], slice(None)), gcols[:, :, j, :])
        grads = [gx, gw]
        if len(vals) == 3:
            grads.append(g2.sum(axis=0))
        return grads


def _window_argmax(x, width, stride):
    """Windows over axis 1 of (B, L, C); returns (max values, absolute argmax)."""
    lout = (x.shape[1] - width) // stride + 1
    idx = np.arange(lout)[:, None] * stride + np.arange(width)[None, :]
    win = x[:, idx, :]  # (B, lout, width, C)
    # argmax returns the first occurrence, i.e. ties go to the lowest index
    arg = win.argmax(axis=2)
    pos = idx[np.arange(lout)[None, :, None], arg]
    return np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :], pos


@primitive("maxpool1d")
class _MaxPool1d:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        width = int(attrs.get("width", 2))
        stride = int(attrs.get("stride", width))
        if x.ndim != 3:
            _fail("maxpool1d", f"expected (B, L, C), got {x.shape}")
        if x.shape[1] < width:
            _fail("maxpool1d", f"input length {x.shape[1]} shorter than pool width {width}")
        out, pos = _window_argmax(x, width, stride)
        return out, pos

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x = vals[0]
        pos = cache
        gx = np.zeros_like(x)
        b = np.arange(x.shape[0])[:, None, None]
        c = np.arange(x.shape[2])[None, None, :]
        np.add.at(gx, (b, pos, c), g)
        return [gx]


@primitive("global_avg_pool")
class _GlobalAvgPool:
    """(B, T, C) -> (B, C), mean over T."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        if x.ndim != 3:
            _fail("global_avg_pool", f"expected (B, T, C), got {x.shape}")
        return x.mean(axis=1), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x = vals[0]
        return [np.broadcast_to(g[:, None, :] / x.shape[1], x.shape).copy()]


@primitive("temporal_max_pool")
class _TemporalMaxPool:
    """(B, T, C) -> (B, C), max over T; ties route to the lowest index."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        if x.ndim != 3:
            _fail("temporal_max_pool", f"expected (B, T, C), got {x.shape}")
        arg = x.argmax(axis=1)
        return np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :], arg

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x = vals[0]
        gx = np.zeros_like(x)
        np.put_along_axis(gx, cache[:, None, :], g[:, None, :], axis=1)
        return [gx]


def _same_shape(op, vals):
    if vals[0].shape != vals[1].shape:
        _fail(op, f"operand shapes differ: {vals[0].shape} vs {vals[1].shape}")


@primitive("add")
class _Add:
    @staticmethod
    def forward(vals, attrs):
        _same_shape("add", vals)
        return vals[0] + vals[1], None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [g, g]


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(vals, attrs):
        _same_shape("mul", vals)
        return vals[0] * vals[1], None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [g * vals[1], g * vals[0]]


@primitive("reduce_sum")
class _ReduceSum:
    @staticmethod
    def forward(vals, attrs):
        return np.array(vals[0].sum()), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [np.full(vals[0].shape, float(g))]


@primitive("reduce_mean")
class _ReduceMean:
    @staticmethod
    def forward(vals, attrs):
        return np.array(vals[0].mean()), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [np.full(vals[0].shape, float(g) / vals[0].size)]


@primitive("scale")
class _Scale:
    """a * x + b for python scalars a, b."""

    @staticmethod
    def forward(vals, attrs):
        return attrs.get("a", 1.0) * vals[0] + attrs.get("b", 0.0), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [attrs.get("a", 1.0) * g]


@primitive("log")
class _Log:
    """log(clip(x, lo, hi)); gradient is zero where the clip is active."""

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        lo = attrs.get("lo", 0.0)
        hi = attrs.get("hi", np.inf)
        if lo <= 0.0 and np.any(x <= 0.0):
            _fail("log", "non-positive input without a positive lower clip")
        clipped = np.clip(x, lo, hi)
        return np.log(clipped), clipped

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        x = vals[0]
        inside = cache == x
        return [np.where(inside, g / cache, 0.0)]


@primitive("abs")
class _Abs:
    @staticmethod
    def forward(vals, attrs):
        return np.abs(vals[0]), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        return [g * np.sign(vals[0])]


@primitive("l1_norm")
class _L1Norm:
    """sum |x| in one node; subgradient sign(x), 0 at 0."""

    @staticmethod
    def forward(vals, attrs):
        return np.array(np.abs(vals[0]).sum()), None

    @staticmethod
    def backward(g, vals, out, cache, attrs):
        gx = np.sign(vals[0])
        gx *= float(g)
        return [gx]


PRIMITIVES = tuple(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence[Node], attrs: dict | None = None) -> Node:
    """Evaluate primitive ``kind`` on ``inputs`` and record the result on the tape."""
    try:
        fwd, _ = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {', '.join(PRIMITIVES)}") from None
    attrs = attrs or {}
    vals = [n.value for n in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # reported below instead
        out, cache = fwd(vals, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    return Node(kind, inputs, out, attrs, cache)


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every node reachable from ``loss``.

    Gradients are added to whatever ``grad`` already holds, so two calls
    without :func:`zero_grads` in between leave the gradient of the sum.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if not node.inputs:
            continue
        _, bwd = _PRIMITIVES[node.op]
        grads = bwd(g, [n.value for n in node.inputs], node.value, node.cache, node.attrs)
        for parent, pg in zip(node.inputs, grads):
            if pg is None:
                continue
            key = id(parent)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg


def zero_grads(params) -> None:
    for p in params:
        p.node.grad = None


# convenience wrappers -------------------------------------------------------

def linear(x, w, b=None):
    return apply_primitive("linear", [x, w] if b is None else [x, w, b])


def relu(x):
    return apply_primitive("relu", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def concat(nodes, axis=-1):
    return apply_primitive("concat", list(nodes), {"axis": axis})


def embedding(table, ids):
    return apply_primitive("embedding", [table], {"ids": np.asarray(ids)})


def conv1d(x, w, b=None, stride=1):
    return apply_primitive("conv1d", [x, w] if b is None else [x, w, b], {"stride": stride})


def maxpool1d(x, width=2, stride=None):
    return apply_primitive("maxpool1d", [x], {"width": width, "stride": stride or width})


def temporal_max_pool(x):
    return apply_primitive("temporal_max_pool", [x])


def global_avg_pool(x):
    return apply_primitive("global_avg_pool", [x])


def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def reduce_sum(x):
    return apply_primitive("reduce_sum", [x])


def reduce_mean(x):
    return apply_primitive("reduce_mean", [x])


def scale(x, a=1.0, b=0.0):
    return apply_primitive("scale", [x], {"a": float(a), "b": float(b)})


def log(x, lo=0.0, hi=np.inf):
    return apply_primitive("log", [x], {"lo": lo, "hi": hi})


def absolute(x):
    return apply_primitive("abs", [x])


def l1_norm(x):
    return apply_primitive("l1_norm", [x])


def add_all(nodes):
    nodes = list(nodes)
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return total
