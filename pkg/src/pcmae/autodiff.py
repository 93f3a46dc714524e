"""Minimal reverse-mode autodiff over NumPy arrays.

The engine provides exactly the primitives the patch-transformer network
needs.  Every op checks its output for NaN/Inf (a numeric error names the
offending op), records a graph node when any input requires gradients, and
has a closed-form backward rule.  Gradients accumulate additively across
fan-out; accumulation order is fixed by node creation order, so repeated
runs are bitwise reproducible.

Convention: float32 for training, float64 for finite-difference checks.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import NumericError, UsageError

_SEQ = itertools.count()
_GRAD_ENABLED = True

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / numeric probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """Op record: kind, input tensors, saved arrays needed by backward."""

    __slots__ = ("op", "seq", "inputs", "saved", "backward_fn")

    def __init__(self, op, seq, inputs, saved, backward_fn):
        self.op = op
        self.seq = seq
        self.inputs = inputs
        self.saved = saved
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}#{self.seq})"


class Tensor:
    """N-d array with optional gradient tracking.

    Treated as immutable after creation except for ``grad`` population;
    mutating ``data`` in place is reserved for optimizer updates and
    finite-difference probing of leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        return backward(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Small arithmetic conveniences; all routed through the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(op: str, out: np.ndarray, inputs, saved, backward_fn) -> Tensor:
    seq = next(_SEQ)
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite output from op {op}#{seq}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.seq = seq
    t.requires_grad = _GRAD_ENABLED and any(i.requires_grad for i in inputs)
    t.node = (
        Node(op, seq, tuple(inputs), saved, backward_fn) if t.requires_grad else None
    )
    return t


def _check_tensors(op, inputs):
    for i in inputs:
        if not isinstance(i, Tensor):
            raise UsageError(f"{op} expects Tensor inputs, got {type(i).__name__}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) when both carry equal leading dims."""
    _check_tensors("matmul", (a, b))
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise UsageError("matmul operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise UsageError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        return (
            np.matmul(g, b.data.swapaxes(-1, -2)),
            np.matmul(a.data.swapaxes(-1, -2), g),
        )

    return _make("matmul", out, (a, b), {}, bwd)


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise UsageError(
            f"{op} requires identical shapes, got {a.shape} vs {b.shape}; "
            "apply broadcast() first"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensors("add", (a, b))
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), {}, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensors("sub", (a, b))
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), {}, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensors("mul", (a, b))
    _same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), {}, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    _check_tensors("scale", (a,))
    s = float(s)
    return _make("scale", a.data * s, (a,), {}, lambda g: (g * s,))


def concat_axis(inputs, axis: int) -> Tensor:
    inputs = list(inputs)
    _check_tensors("concat_axis", inputs)
    if not inputs:
        raise UsageError("concat_axis of zero tensors")
    out = np.concatenate([t.data for t in inputs], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in inputs])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat_axis", out, inputs, {}, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_tensors("slice_axis", (a,))
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise UsageError(f"slice_axis [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("slice_axis", out, (a,), {}, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    _check_tensors("reshape", (a,))
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), {}, lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    _check_tensors("transpose", (a,))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make("transpose", out, (a,), {}, lambda g: (np.transpose(g, inv),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """out[i...] = a[indices[i...]] along axis 0; backward scatter-adds."""
    _check_tensors("gather_rows", (a,))
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise UsageError("gather_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise UsageError("gather_rows index out of range")
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather_rows", out, (a,), {"indices": idx}, bwd)


def softmax_lastaxis(a: Tensor) -> Tensor:
    _check_tensors("softmax_lastaxis", (a,))
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax_lastaxis", y, (a,), {}, bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    _check_tensors("layer_norm", (a,))
    if a.data.shape[-1] < 1:
        raise UsageError("layer_norm needs a non-empty last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), {}, bwd)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    _check_tensors("gelu", (a,))
    x = a.data
    u = _GELU_K * (x + _GELU_C * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _make("gelu", y, (a,), {}, bwd)


def relu(a: Tensor) -> Tensor:
    _check_tensors("relu", (a,))
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), {}, lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    """Natural log; non-positive inputs surface as a numeric error."""
    _check_tensors("log", (a,))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), {}, lambda g: (g / a.data,))


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Max reduction; argmax (first index on ties) is recorded for backward."""
    _check_tensors("max_over_axis", (a,))
    idx = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(
            full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (full,)

    return _make("max_over_axis", out, (a,), {"argmax": idx}, bwd)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    _check_tensors("mean_over_axis", (a,))
    n = a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape) * (1.0 / n),)

    return _make("mean_over_axis", out, (a,), {}, bwd)


def sum_all(a: Tensor) -> Tensor:
    """Reduce every element to a scalar."""
    _check_tensors("sum", (a,))
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, g.reshape(())[()], dtype=a.data.dtype),)

    return _make("sum", out, (a,), {}, bwd)


def broadcast(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape``; backward sums over expanded axes."""
    _check_tensors("broadcast", (a,))
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise UsageError(f"cannot broadcast {a.shape} to {shape}") from exc
    in_shape = a.data.shape

    def bwd(g):
        extra = g.ndim - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, s in enumerate(in_shape) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _make("broadcast", out, (a,), {}, bwd)


#: Dispatch table; the uniform surface used by random-graph tests.
OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat_axis": concat_axis,
    "slice_axis": slice_axis,
    "reshape": reshape,
    "transpose": transpose,
    "gather_rows": gather_rows,
    "softmax_lastaxis": softmax_lastaxis,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "log": log,
    "max_over_axis": max_over_axis,
    "mean_over_axis": mean_over_axis,
    "sum": sum_all,
    "broadcast": broadcast,
}


def primitive_forward(op_kind: str, inputs, **params) -> Tensor:
    """Uniform entry point: apply a primitive by name."""
    if op_kind not in OPS:
        raise UsageError(f"unknown op kind {op_kind!r}")
    fn = OPS[op_kind]
    if op_kind == "concat_axis":
        return fn(inputs, **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def trace(sink: Tensor):
    """Nodes reachable from ``sink``, topologically ordered (inputs first)."""
    seen = set()
    nodes = []
    stack = [sink]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append((t.seq, t.node))
        stack.extend(t.node.inputs)
    nodes.sort(key=lambda p: p[0])
    return [n for _, n in nodes]


def backward(sink: Tensor, on_node=None):
    """Populate ``grad`` on every requires_grad tensor reachable from ``sink``.

    Returns a map Tensor -> gradient array.  The sink must be scalar.
    Each graph node's backward rule runs exactly once; multiple consumers
    of one tensor have their contributions summed (fan-out accumulation).
    """
    if not isinstance(sink, Tensor):
        raise UsageError("backward expects a Tensor sink")
    if sink.data.size != 1:
        raise UsageError(f"backward sink must be scalar, got shape {sink.shape}")
    if not sink.requires_grad:
        return {}

    # Reverse creation order is reverse-topological for the reachable set.
    order = []
    seen = set()
    stack = [sink]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        if t.node is not None:
            stack.extend(i for i in t.node.inputs if i.requires_grad)
    order.sort(key=lambda t: t.seq, reverse=True)

    grads = {id(sink): np.ones_like(sink.data)}
    result = {}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        result[t] = g
        if t.node is None:
            continue
        if on_node is not None:
            on_node(t.node)
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig  # never in-place: arrays may alias
            else:
                grads[key] = ig
    return result


def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor and must be deterministic.
    Error metric per coordinate: |analytic - numeric| / max(1, |numeric|).
    Use float64 inputs; central differences are unreliable in float32.
    """
    for t in inputs:
        t.grad = None
    out = f(inputs)
    backward(out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    max_err = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            a = np.asarray(a)
            for idx in np.ndindex(*t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + h
                fp = f(inputs).item()
                t.data[idx] = orig - h
                fm = f(inputs).item()
                t.data[idx] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(float(a[idx]) - numeric) / max(1.0, abs(numeric))
                max_err = max(max_err, err)
    return max_err
