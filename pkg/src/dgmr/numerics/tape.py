"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A ``Var`` wraps an ndarray plus the closure that maps its output gradient
to parent gradients. Graphs are built eagerly by the op functions below
and differentiated by :func:`backward`, which walks the tape in reverse
topological order. Only a fixed set of primitives is provided; everything
in the model is composed from them so that gradients stay finite-difference
checkable end to end.

Conventions:
    * all values are float64 ndarrays (scalars become 0-d arrays),
    * broadcasting follows numpy; gradients are summed back to the
      parent's shape,
    * ``backward`` requires a scalar root.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .. import backend


class Var:
    """Node in the autodiff graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return "Var(shape=%s, requires_grad=%s)" % (
            self.value.shape,
            self.requires_grad,
        )

    # Operator sugar; all routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def wrap(x) -> Var:
    """Coerce arrays and scalars into constant Vars."""
    if isinstance(x, Var):
        return x
    return Var(x)


def constant(x) -> Var:
    return Var(x)


def param(x) -> Var:
    return Var(x, requires_grad=True)


def _node(value, parents, backward_fn) -> Var:
    req = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=req, parents=parents, backward_fn=backward_fn)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar root into ``requires_grad`` leaves."""
    if root.value.size != 1:
        raise ValueError("backward requires a scalar root, got shape %s"
                         % (root.value.shape,))
    if not root.requires_grad:
        return
    topo = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g


def zero_grads(params: Iterable[Var]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(out, (a, b), bwd)


def mul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _node(out, (a, b), bwd)


def div(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = a.value / b.value

    def bwd(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return _node(out, (a, b), bwd)


def matmul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = np.matmul(a.value, b.value)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x) -> Var:
    x = wrap(x)
    out = 1.0 / (1.0 + np.exp(-np.clip(x.value, -500.0, 500.0)))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bwd)


def tanh(x) -> Var:
    x = wrap(x)
    out = np.tanh(x.value)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), bwd)


def relu(x) -> Var:
    x = wrap(x)
    out = np.maximum(x.value, 0.0)

    def bwd(g):
        return (g * (x.value > 0.0),)

    return _node(out, (x,), bwd)


def exp(x) -> Var:
    x = wrap(x)
    out = np.exp(x.value)

    def bwd(g):
        return (g * out,)

    return _node(out, (x,), bwd)


def log(x) -> Var:
    x = wrap(x)
    out = np.log(x.value)

    def bwd(g):
        return (g / x.value,)

    return _node(out, (x,), bwd)


def sqrt(x) -> Var:
    x = wrap(x)
    out = np.sqrt(x.value)

    def bwd(g):
        return (g * 0.5 / out,)

    return _node(out, (x,), bwd)


def absolute(x) -> Var:
    x = wrap(x)
    out = np.abs(x.value)

    def bwd(g):
        return (g * np.sign(x.value),)

    return _node(out, (x,), bwd)


def cos(x) -> Var:
    x = wrap(x)
    out = np.cos(x.value)

    def bwd(g):
        return (-g * np.sin(x.value),)

    return _node(out, (x,), bwd)


def sin(x) -> Var:
    x = wrap(x)
    out = np.sin(x.value)

    def bwd(g):
        return (g * np.cos(x.value),)

    return _node(out, (x,), bwd)


def softplus(x) -> Var:
    x = wrap(x)
    out = np.logaddexp(0.0, x.value)

    def bwd(g):
        return (g / (1.0 + np.exp(-x.value)),)

    return _node(out, (x,), bwd)


def clip(x, lo=None, hi=None) -> Var:
    x = wrap(x)
    out = np.clip(x.value, lo, hi)
    inside = np.ones_like(x.value, dtype=bool)
    if lo is not None:
        inside &= x.value >= lo
    if hi is not None:
        inside &= x.value <= hi

    def bwd(g):
        return (g * inside,)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False) -> Var:
    x = wrap(x)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return _node(out, (x,), bwd)


def mean_(x, axis=None, keepdims=False) -> Var:
    x = wrap(x)
    out = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.value.size / max(out.size, 1)

    def bwd(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape) / count,)

    return _node(out, (x,), bwd)


def reshape(x, shape) -> Var:
    x = wrap(x)
    out = x.value.reshape(shape)

    def bwd(g):
        return (np.asarray(g).reshape(x.value.shape),)

    return _node(out, (x,), bwd)


def transpose(x, axes=None) -> Var:
    x = wrap(x)
    out = np.transpose(x.value, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(np.asarray(g), inverse),)

    return _node(out, (x,), bwd)


def concat(parts: Sequence, axis=0) -> Var:
    parts = [wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat requires at least one input")
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(np.asarray(g), splits, axis=axis))

    return _node(out, tuple(parts), bwd)


def stack(parts: Sequence, axis=0) -> Var:
    parts = [wrap(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)

    def bwd(g):
        g = np.asarray(g)
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _node(out, tuple(parts), bwd)


def getitem(x, key) -> Var:
    x = wrap(x)
    out = x.value[key]

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        return (gx,)

    return _node(out, (x,), bwd)


def gather_rows(x, idx) -> Var:
    """Select rows of a 2-d Var with an integer index array."""
    x = wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.value[idx]

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), bwd)


def expand0(x, n) -> Var:
    """Tile a Var along a new leading axis of length n."""
    x = wrap(x)
    out = np.broadcast_to(x.value[None, ...], (n,) + x.value.shape).copy()

    def bwd(g):
        return (np.asarray(g).sum(axis=0),)

    return _node(out, (x,), bwd)


def upsample2(x, factor=2) -> Var:
    """Nearest-neighbour upsampling of axes 1 and 2 of a (T, H, W, C) Var."""
    x = wrap(x)
    out = np.repeat(np.repeat(x.value, factor, axis=1), factor, axis=2)

    def bwd(g):
        g = np.asarray(g)
        t, h, w, c = x.value.shape
        g = g.reshape(t, h, factor, w, factor, c)
        return (g.sum(axis=(2, 4)),)

    return _node(out, (x,), bwd)


def avgpool2(x, factor=2) -> Var:
    """Mean-pool axes 1 and 2 of a (T, H, W, C) Var by an integer factor."""
    x = wrap(x)
    t, h, w, c = x.value.shape
    if h % factor or w % factor:
        raise ValueError("grid not divisible by pooling factor")
    out = x.value.reshape(t, h // factor, factor, w // factor, factor, c).mean(
        axis=(2, 4)
    )

    def bwd(g):
        g = np.asarray(g) / (factor * factor)
        g = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return (g,)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization and attention


def layer_norm(x, gain, offset, eps=1.0e-5) -> Var:
    """Normalize the last axis to zero mean, unit (population) variance.

    A zero-variance row combined with eps = 0 has no finite output and is
    rejected.
    """
    x, gain, offset = wrap(x), wrap(gain), wrap(offset)
    mu = np.mean(x.value, axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    if eps == 0.0 and np.any(var == 0.0):
        raise ValueError("layer_norm: zero-variance row with eps = 0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.value * xhat + offset.value
    d = x.value.shape[-1]

    def bwd(g):
        g = np.asarray(g, dtype=np.float64)
        sum_axes = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=sum_axes)
        goffset = np.sum(g, axis=sum_axes)
        dxhat = g * gain.value
        gx = (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        ) * inv
        return (
            gx,
            _unbroadcast(ggain, gain.value.shape),
            _unbroadcast(goffset, offset.value.shape),
        )

    return _node(out, (x, gain, offset), bwd)


def attention(q, k, v, scale) -> Var:
    """Scaled dot-product attention on (B, n, d) Vars via the backend."""
    q, k, v = wrap(q), wrap(k), wrap(v)
    if q.value.ndim != 3 or k.value.ndim != 3 or v.value.ndim != 3:
        raise ValueError("attention expects (B, n, d) arrays")
    if k.value.shape[1] == 0:
        raise ValueError("attention requires a non-empty key set")
    if not scale > 0.0:
        raise ValueError("attention scale must be positive")
    out, attn = backend.attention_forward(q.value, k.value, v.value, float(scale))

    def bwd(g):
        return backend.attention_backward(
            q.value, k.value, v.value, attn, float(scale), np.asarray(g)
        )

    return _node(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# rotation and skinning primitives (backend-accelerated)


def quat_mul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    out = backend.quat_mul(a.value, b.value)

    def bwd(g):
        return backend.quat_mul_backward(a.value, b.value, np.asarray(g))

    return _node(out, (a, b), bwd)


def quat_rotate(q, v) -> Var:
    q, v = wrap(q), wrap(v)
    out = backend.quat_rotate(q.value, v.value)

    def bwd(g):
        return backend.quat_rotate_backward(q.value, v.value, np.asarray(g))

    return _node(out, (q, v), bwd)


def quat_to_mat(q) -> Var:
    q = wrap(q)
    out = backend.quat_to_mat(q.value)

    def bwd(g):
        return (backend.quat_to_mat_backward(q.value, np.asarray(g)),)

    return _node(out, (q,), bwd)


def aa_to_quat(v) -> Var:
    v = wrap(v)
    out = backend.aa_to_quat(v.value)

    def bwd(g):
        return (backend.aa_to_quat_backward(v.value, np.asarray(g)),)

    return _node(out, (v,), bwd)


def lbs(weights, rel, rot, pos) -> Var:
    """Linear blend skinning; differentiable in rel, rot and pos."""
    weights_v = np.asarray(wrap(weights).value, dtype=np.float64)
    rel, rot, pos = wrap(rel), wrap(rot), wrap(pos)
    out = backend.lbs_forward(weights_v, rel.value, rot.value, pos.value)

    def bwd(g):
        grel, grot, gpos = backend.lbs_backward(
            weights_v, rel.value, rot.value, np.asarray(g)
        )
        return grel, grot, gpos

    return _node(out, (rel, rot, pos), bwd)


# ---------------------------------------------------------------------------
# composed helpers


def unit_rows(x, eps=1.0e-12) -> Var:
    """Normalize the last axis of a Var to unit Euclidean norm."""
    x = wrap(x)
    nrm2 = sum_(mul(x, x), axis=-1, keepdims=True)
    return div(x, sqrt(add(nrm2, eps)))


def dot_last(a, b, keepdims=True) -> Var:
    return sum_(mul(a, b), axis=-1, keepdims=keepdims)
