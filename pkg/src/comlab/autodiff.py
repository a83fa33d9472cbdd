"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive application as a :class:`TapeNode`
in topological order. Values are numpy arrays; leading axes broadcast the
way numpy does, which lets one tape hold a whole minibatch at once.

Example::

    tape = Tape()
    x = tape.leaf(np.array([3.0, 4.0]))
    y = tape.apply("sqnorm", [x])
    grads = backward(tape, y)
    grads[x.id]  # array([6., 8.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""


class UnknownPrimitiveError(KeyError):
    pass


@dataclass
class TapeNode:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    requires_grad: bool = False
    name: str | None = None
    adjoint: np.ndarray | None = None  # None reads as zeros


# --------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, *arrays: np.ndarray) -> None:
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op}: shapes {shapes} do not broadcast") from None


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fold the batch into one GEMM when the right operand is a plain matrix
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        return (a.reshape(-1, k) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return np.matmul(a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_prime(x: np.ndarray) -> np.ndarray:
    sig = _sigmoid(x)
    return sig * (1.0 + x * (1.0 - sig))


def silu_second(x: np.ndarray) -> np.ndarray:
    sig = _sigmoid(x)
    return sig * (1.0 - sig) * (2.0 + x * (1.0 - 2.0 * sig))


# --------------------------------------------------------------------------
# primitives: forward(values, attrs) -> value ; vjp(g, values, out, attrs) -> grads


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from None
    return _mm(a, b)


def _matmul_vjp(g, vals, out, attrs):
    a, b = vals
    ga = _unbroadcast(_mm(g, _swap(b)) if b.ndim == 2 else np.matmul(g, _swap(b)), a.shape)
    if b.ndim == 2 and a.ndim > 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.matmul(_swap(a), g), b.shape)
    return ga, gb


def _binary_fwd(op, fn):
    def fwd(vals, attrs):
        _check_broadcast(op, *vals)
        return fn(*vals)

    return fwd


def _add_vjp(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _sub_vjp(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


def _hadamard_vjp(g, vals, out, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _concat_fwd(vals, attrs):
    axis = attrs.get("axis", 0)
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise ShapeError(f"concat_rows: cannot concatenate shapes {shapes} on axis {axis}") from None


def _concat_vjp(g, vals, out, attrs):
    axis = attrs.get("axis", 0)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _slice_fwd(vals, attrs):
    (a,) = vals
    try:
        return np.array(a[attrs["index"]])
    except IndexError as exc:
        raise ShapeError(f"slice: index {attrs['index']} invalid for shape {a.shape}: {exc}") from None


def _slice_vjp(g, vals, out, attrs):
    ga = np.zeros_like(vals[0])
    ga[attrs["index"]] = g
    return (ga,)


def _transpose_fwd(vals, attrs):
    (a,) = vals
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 dimensions, got shape {a.shape}")
    return _swap(a)


def _sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum_vjp(g, vals, out, attrs):
    return (_expand_reduced(g, vals[0].shape, attrs.get("axis"), attrs.get("keepdims", False)),)


def _dot_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return np.sum(a * b, axis=-1)


def _dot_vjp(g, vals, out, attrs):
    a, b = vals
    g = np.expand_dims(g, -1)
    return g * b, g * a


def _sqnorm_fwd(vals, attrs):
    a = vals[0]
    return np.sum(a * a, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _sqnorm_vjp(g, vals, out, attrs):
    a = vals[0]
    return (2.0 * a * _expand_reduced(g, a.shape, attrs.get("axis"), attrs.get("keepdims", False)),)


def _outer_fwd(vals, attrs):
    a, b = vals
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"outer: needs vectors, got shapes {a.shape} and {b.shape}")
    _check_broadcast("outer", a[..., :1], b[..., :1])
    return a[..., :, None] * b[..., None, :]


def _outer_vjp(g, vals, out, attrs):
    a, b = vals
    ga = np.sum(g * b[..., None, :], axis=-1)
    gb = np.sum(g * a[..., :, None], axis=-2)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _diag_fwd(vals, attrs):
    a = vals[0]
    if a.ndim < 1:
        raise ShapeError(f"diag_from_vector: needs a vector, got shape {a.shape}")
    n = a.shape[-1]
    return a[..., :, None] * np.eye(n)


def _diag_vjp(g, vals, out, attrs):
    return (np.diagonal(g, axis1=-2, axis2=-1).copy(),)


def _identity_minus_fwd(vals, attrs):
    a = vals[0]
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"identity_minus: needs square matrices, got shape {a.shape}")
    return np.eye(a.shape[-1]) - a


def _reshape_fwd(vals, attrs):
    a = vals[0]
    try:
        return a.reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {attrs['shape']}") from None


def _unary(fn, dfn):
    def fwd(vals, attrs):
        return fn(vals[0])

    def vjp(g, vals, out, attrs):
        return (g * dfn(vals[0], out),)

    return fwd, vjp


_UNARY = {
    "reciprocal": _unary(lambda a: 1.0 / a, lambda a, out: -out * out),
    "sqrt": _unary(np.sqrt, lambda a, out: 0.5 / out),
    "relu": _unary(lambda a: np.maximum(a, 0.0), lambda a, out: (a > 0).astype(float)),
    "relu_indicator": _unary(lambda a: (a > 0).astype(float), lambda a, out: np.zeros_like(a)),
}


# silu-family primitives read a sigmoid the tape caches per input node
def _silu_fwd(vals, attrs):
    return vals[0] * attrs["sigmoid"]


def _silu_vjp(g, vals, out, attrs):
    x, sig = vals[0], attrs["sigmoid"]
    return (g * sig * (1.0 + x * (1.0 - sig)),)


def _silu_prime_fwd(vals, attrs):
    x, sig = vals[0], attrs["sigmoid"]
    return sig * (1.0 + x * (1.0 - sig))


def _silu_prime_vjp(g, vals, out, attrs):
    x, sig = vals[0], attrs["sigmoid"]
    return (g * sig * (1.0 - sig) * (2.0 + x * (1.0 - 2.0 * sig)),)


_SIGMOID_OPS = ("silu", "silu_prime")

PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_binary_fwd("add", np.add), _add_vjp),
    "sub": (_binary_fwd("sub", np.subtract), _sub_vjp),
    "hadamard": (_binary_fwd("hadamard", np.multiply), _hadamard_vjp),
    "scale": (lambda vals, attrs: vals[0] * attrs["factor"], lambda g, vals, out, attrs: (g * attrs["factor"],)),
    "concat_rows": (_concat_fwd, _concat_vjp),
    "slice": (_slice_fwd, _slice_vjp),
    "transpose": (_transpose_fwd, lambda g, vals, out, attrs: (_swap(g),)),
    "sum": (_sum_fwd, _sum_vjp),
    "dot": (_dot_fwd, _dot_vjp),
    "sqnorm": (_sqnorm_fwd, _sqnorm_vjp),
    "outer": (_outer_fwd, _outer_vjp),
    "diag_from_vector": (_diag_fwd, _diag_vjp),
    "identity_minus": (_identity_minus_fwd, lambda g, vals, out, attrs: (-g,)),
    "reshape": (_reshape_fwd, lambda g, vals, out, attrs: (g.reshape(vals[0].shape),)),
    "silu": (_silu_fwd, _silu_vjp),
    "silu_prime": (_silu_prime_fwd, _silu_prime_vjp),
    **_UNARY,
}


# --------------------------------------------------------------------------
# tape


class Node:
    """Handle to a tape node; arithmetic operators record primitives."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Node(id={self.id}, op={node.op!r}, shape={node.value.shape})"

    def _bin(self, op, other, swap=False):
        other = self.tape.lift(other)
        args = [other, self] if swap else [self, other]
        return self.tape.apply(op, args)

    def __add__(self, other):
        return self._bin("add", other)

    def __radd__(self, other):
        return self._bin("add", other, swap=True)

    def __sub__(self, other):
        return self._bin("sub", other)

    def __rsub__(self, other):
        return self._bin("sub", other, swap=True)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", [self], factor=float(other))
        return self._bin("hadamard", other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", [self], factor=float(other))
        return self._bin("hadamard", other, swap=True)

    def __truediv__(self, other):
        if not np.isscalar(other):
            return NotImplemented
        return self.tape.apply("scale", [self], factor=1.0 / float(other))

    def __neg__(self):
        return self.tape.apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return self._bin("matmul", other)

    def __rmatmul__(self, other):
        return self._bin("matmul", other, swap=True)

    def __getitem__(self, index):
        return self.tape.apply("slice", [self], index=index)

    @property
    def T(self) -> Node:
        return self.tape.apply("transpose", [self])

    def sum(self, axis=None, keepdims=False) -> Node:
        return self.tape.apply("sum", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Node:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", [self], shape=tuple(shape))


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._sigmoid: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, attrs, requires_grad, name=None) -> Node:
        node = TapeNode(len(self.nodes), op, tuple(inputs), value, attrs, requires_grad, name)
        self.nodes.append(node)
        return Node(self, node.id)

    def leaf(self, value, name: str | None = None) -> Node:
        """Record a differentiable input."""
        return self._push("leaf", (), np.array(value, dtype=np.float64), {}, True, name)

    def constant(self, value) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), {}, False)

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)

    def apply(self, primitive: str, inputs, **attrs) -> Node:
        try:
            fwd, _ = PRIMITIVES[primitive]
        except KeyError:
            raise UnknownPrimitiveError(f"unknown primitive {primitive!r}") from None
        ids = [self.lift(x).id for x in inputs]
        vals = [self.nodes[i].value for i in ids]
        if primitive in _SIGMOID_OPS:
            sig = self._sigmoid.get(ids[0])
            if sig is None:
                sig = self._sigmoid[ids[0]] = _sigmoid(vals[0])
            attrs = {**attrs, "sigmoid": sig}
        out = np.asarray(fwd(vals, attrs), dtype=np.float64)
        requires_grad = any(self.nodes[i].requires_grad for i in ids)
        return self._push(primitive, ids, out, attrs, requires_grad)


def apply(tape: Tape, primitive: str, inputs, attrs: dict | None = None) -> Node:
    return tape.apply(primitive, inputs, **(attrs or {}))


def backward(tape: Tape, root: Node | int, wrt=None) -> dict[int, np.ndarray]:
    """Propagate adjoints from the scalar ``root`` back through ``tape``.

    Returns a mapping from node id to adjoint for every leaf (or for the
    nodes listed in ``wrt``). Leaves the root never reached get zeros.
    """
    root_id = root.id if isinstance(root, Node) else int(root)
    nodes = tape.nodes
    if nodes[root_id].value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {nodes[root_id].value.shape}")

    adj: dict[int, np.ndarray] = {root_id: np.ones_like(nodes[root_id].value)}
    for node in reversed(nodes[: root_id + 1]):
        g = adj.get(node.id)
        if g is None or not node.inputs or not node.requires_grad:
            continue
        _, vjp = PRIMITIVES[node.op]
        vals = [nodes[i].value for i in node.inputs]
        grads = vjp(g, vals, node.value, node.attrs)
        for i, gi in zip(node.inputs, grads):
            if not nodes[i].requires_grad:
                continue
            if i in adj:
                adj[i] = adj[i] + gi
            else:
                adj[i] = gi

    for node in nodes:
        node.adjoint = adj.get(node.id)

    if wrt is None:
        targets = [n.id for n in nodes if n.op == "leaf"]
    else:
        targets = [w.id if isinstance(w, Node) else int(w) for w in wrt]
    return {i: nodes[i].adjoint if nodes[i].adjoint is not None else np.zeros_like(nodes[i].value)
            for i in targets}


def grad(f: Callable, x):
    """Value and gradient of ``f(tape, leaves)`` at ``x``.

    ``x`` is an array or a dict of arrays; the gradient mirrors its structure.
    """
    tape = Tape()
    if isinstance(x, dict):
        leaves = {k: tape.leaf(v, name=k) for k, v in x.items()}
    else:
        leaves = tape.leaf(x)
    out = f(tape, leaves)
    adj = backward(tape, out)
    if isinstance(x, dict):
        g = {k: adj[n.id] for k, n in leaves.items()}
    else:
        g = adj[leaves.id]
    return float(out.value.reshape(())), g


def _scalar_eval(f, x) -> float:
    tape = Tape()
    if isinstance(x, dict):
        leaves = {k: tape.constant(v) for k, v in x.items()}
    else:
        leaves = tape.constant(x)
    return float(f(tape, leaves).value.reshape(()))


def finite_diff_check(f: Callable, x, h: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    ``f(tape, leaves)`` must return a scalar node. The error per coordinate is
    ``|ad - fd| / max(1, |fd|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    value, g = grad(f, x)
    if not np.isfinite(value):
        raise FloatingPointError(f"f(x) is not finite: {value}")

    items = x.items() if isinstance(x, dict) else [(None, x)]
    worst = 0.0
    for key, arr in items:
        arr = np.array(arr, dtype=np.float64)
        ad = g[key] if key is not None else g
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + h
            fp = _scalar_eval(f, {**x, key: arr} if key is not None else arr)
            arr[idx] = saved - h
            fm = _scalar_eval(f, {**x, key: arr} if key is not None else arr)
            arr[idx] = saved
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(ad[idx] - fd) / max(1.0, abs(fd)))
    return worst
