"""Small reverse-mode differentiation engine over dense float64 arrays.

Graphs are built eagerly: every operation computes its value on creation and
remembers its parents, so a ``Tensor`` is also the root of the graph that
produced it. ``Graph`` gives the topological view of that structure and can
re-run the forward pass after leaf values change, which is what the
finite-difference checks use.

Only first-order derivatives are supported.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "stop_grad", "op", "parents", "attrs", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.stop_grad = False
        self.op = None
        self.parents = ()
        self.attrs = {}
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op is None

    def __repr__(self):
        kind = self.op.name if self.op is not None else "leaf"
        return f"Tensor({kind}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.value

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x):
    return Tensor(x)


def parameter(x, name=None):
    return Tensor(x, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# Operation table

class _Op:
    """Forward and vector-Jacobian product for one primitive."""

    def __init__(self, name, forward, backward, check=None):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.check = check


def _apply(op, *parents, **attrs):
    parents = tuple(as_tensor(p) for p in parents)
    vals = [p.value for p in parents]
    if op.check is not None:
        op.check(*vals, **attrs)
    out = Tensor(op.forward(*vals, **attrs))
    out.op = op
    out.parents = parents
    out.attrs = attrs
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _same_shape(name):
    def check(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")
    return check


def _broadcastable(name):
    def check(a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None
    return check


def _check_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")


def _matmul_bwd(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _check_bias(x, b):
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match trailing axis of {x.shape}")


_sigmoid = expit


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_xent(logits, onehot):
    if logits.shape != onehot.shape or logits.ndim != 2:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs targets {onehot.shape}")


def _xent_bwd(g, out, logits, onehot):
    p = np.exp(_log_softmax(logits))
    return g[:, None] * (p - onehot), None


def _sum_fwd(x, axis=None):
    return x.sum(axis=axis)


def _sum_bwd(g, out, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(x, axis=None):
    return x.mean(axis=axis)


def _mean_bwd(g, out, x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def _check_concat(*xs):
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[x.shape for x in xs]}")


def _concat_bwd(g, out, *xs):
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=-1))


_OPS = {}


def _register(name, forward, backward, check=None):
    op = _Op(name, forward, backward, check)
    _OPS[name] = op
    return op


_ADD = _register(
    "add", lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    _broadcastable("add"))
_SUB = _register(
    "sub", lambda a, b: a - b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    _broadcastable("sub"))
_MUL = _register(
    "mul", lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    _broadcastable("mul"))
_DIV = _register(
    "div", lambda a, b: a / b,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
    _broadcastable("div"))
_NEG = _register("neg", lambda a: -a, lambda g, out, a: (-g,))
_MATMUL = _register("matmul", lambda a, b: a @ b, _matmul_bwd, _check_matmul)
_BIAS = _register(
    "bias_add", lambda x, b: x + b,
    lambda g, out, x, b: (g, _unbroadcast(g, b.shape)),
    _check_bias)
_RELU = _register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))
_SIGMOID = _register("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),))
_SWISH = _register(
    "swish", lambda x: x * _sigmoid(x),
    lambda g, out, x: (g * _swish_grad(x),))
_TANH = _register("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),))
_SOFTPLUS = _register("softplus", _softplus, lambda g, out, x: (g * _sigmoid(x),))
_EXP = _register("exp", np.exp, lambda g, out, x: (g * out,))
_LOG = _register("log", np.log, lambda g, out, x: (g / x,))
_SQUARE = _register("square", np.square, lambda g, out, x: (2.0 * g * x,))
_SUM = _register("sum", _sum_fwd, _sum_bwd)
_MEAN = _register("mean", _mean_fwd, _mean_bwd)
_CONCAT = _register(
    "concat", lambda *xs: np.concatenate(xs, axis=-1), _concat_bwd, _check_concat)
_SOFTMAX = _register(
    "softmax", lambda x: np.exp(_log_softmax(x)),
    lambda g, out, x: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))
_XENT = _register(
    "softmax_xent", lambda logits, onehot: -(onehot * _log_softmax(logits)).sum(axis=-1),
    _xent_bwd, _check_xent)


def _swish_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# --------------------------------------------------------------------------
# Public operations

def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def neg(a):
    return _apply(_NEG, a)


def matmul(a, b):
    return _apply(_MATMUL, a, b)


def bias_add(x, b):
    """Add a bias vector along the trailing axis of ``x``."""
    return _apply(_BIAS, x, b)


def relu(x):
    return _apply(_RELU, x)


def sigmoid(x):
    return _apply(_SIGMOID, x)


def swish(x):
    return _apply(_SWISH, x)


def tanh(x):
    return _apply(_TANH, x)


def softplus(x):
    return _apply(_SOFTPLUS, x)


def exp(x):
    return _apply(_EXP, x)


def log(x):
    return _apply(_LOG, x)


def square(x):
    return _apply(_SQUARE, x)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return _apply(_SUM, x, axis=axis)


def mean(x, axis=None):
    return _apply(_MEAN, x, axis=axis)


def concat(*xs):
    """Concatenate along the feature (last) axis."""
    return _apply(_CONCAT, *xs)


def softmax(logits):
    return _apply(_SOFTMAX, logits)


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Fused and shifted by the row maximum, so large logits do not overflow.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return _apply(_XENT, logits, Tensor(onehot))


def stop_grad(t):
    """Pass the value through and block every gradient flowing back into ``t``."""
    t = as_tensor(t)
    out = Tensor(t.value)
    out.stop_grad = True
    return out


# --------------------------------------------------------------------------
# Graph traversal

class Graph:
    """Topologically ordered view of the nodes reachable from ``root``."""

    def __init__(self, root):
        self.root = root
        self.nodes = _toposort(root)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def forward(self):
        """Recompute every non-leaf value from the current leaf values."""
        for node in self.nodes:
            if node.op is None:
                continue
            vals = [p.value for p in node.parents]
            if node.op.check is not None:
                node.op.check(*vals, **node.attrs)
            node.value = np.asarray(node.op.forward(*vals, **node.attrs), dtype=np.float64)
        return self.root

    def backward(self):
        backward(self.root, graph=self)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(graph):
    return graph.forward()


def backward(root, graph=None):
    """Fill ``.grad`` on every node of the graph that requires a gradient.

    Gradients are written fresh (not accumulated across calls). A
    ``stop_grad`` node has no parents, so nothing upstream of it is reached.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = graph.nodes if graph is not None else _toposort(root)
    for n in nodes:
        n.grad = None
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes):
        if node.op is None or node.grad is None:
            continue
        vals = [p.value for p in node.parents]
        grads = node.op.backward(node.grad, node.value, *vals, **node.attrs)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64)
            else:
                p.grad = p.grad + g
