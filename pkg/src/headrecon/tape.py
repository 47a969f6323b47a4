"""Reverse-mode autodiff on numpy arrays, restricted to the primitives the decoders need.

A ``Tape`` records primitive operations in forward order; ``backward`` replays them
in reverse and accumulates gradients into ``Var.grad``. Gradient buffers are only
allocated when ``backward`` runs. All ops accept any mix of ``Var`` and array-like
operands; with no ``Var`` operand they fall through to plain numpy, so the same
forward code serves both training (taped) and inference (raw numpy) paths.
"""

from __future__ import annotations

import numpy as np

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


class Tape:
    """Records ops in creation order (a topological order of the forward graph)."""

    def __init__(self):
        self._nodes: list[Var] = []

    def var(self, value) -> "Var":
        """Wrap a leaf array as a differentiable variable."""
        return Var(value, self)

    def _record(self, node: "Var"):
        self._nodes.append(node)

    def backward(self, root: "Var", seed=None):
        """Accumulate gradients of ``root`` into every reachable Var's ``.grad``.

        ``seed`` defaults to ones (for a scalar root this is d(root)/d(root) = 1).
        A tape is meant for a single backward pass; rerunning accumulates on top.
        """
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        root.grad = _add_grad(root.grad, np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64))
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._edges:
                parent.grad = _add_grad(parent.grad, vjp(g))

    def clear_grads(self):
        for node in self._nodes:
            node.grad = None

    def release(self):
        """Drop the recorded graph so its memory returns immediately.

        The graph is cyclic (tape <-> vars <-> closures), so without this it
        lingers until a full gc pass; training loops that build a tape per
        step call release() once the gradients have been consumed.
        """
        for node in self._nodes:
            node._edges = ()
            node.grad = None
        self._nodes.clear()


class Var:
    """A recorded value. ``grad`` stays ``None`` until a backward pass reaches it."""

    __slots__ = ("value", "tape", "grad", "_edges")

    def __init__(self, value, tape: Tape, edges=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.grad = None
        self._edges = edges
        tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; all dispatch through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _add_grad(acc, g):
    if acc is None:
        # copy so later in-place += never aliases a vjp output
        return np.array(g, dtype=np.float64, copy=True)
    acc += g
    return acc


def value_of(x) -> np.ndarray:
    """Raw numpy value of a Var or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if t is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=bv.shape: _unbroadcast(g, s)))
    return Var(out, t, tuple(edges))


def sub(a, b):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if t is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=av.shape: _unbroadcast(g, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=bv.shape: _unbroadcast(-g, s)))
    return Var(out, t, tuple(edges))


def mul(a, b):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if t is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=av.shape: _unbroadcast(g * bv, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=bv.shape: _unbroadcast(g * av, s)))
    return Var(out, t, tuple(edges))


def div(a, b):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if t is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=av.shape: _unbroadcast(g / bv, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=bv.shape: _unbroadcast(-g * av / (bv * bv), s)))
    return Var(out, t, tuple(edges))


def neg(a):
    t = _tape_of(a)
    out = -value_of(a)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: -g),))


def matmul(a, b):
    t = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if t is None:
        return out
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: g @ bv.T))
    if isinstance(b, Var):
        edges.append((b, lambda g: av.T @ g))
    return Var(out, t, tuple(edges))


def transpose(a):
    t = _tape_of(a)
    out = value_of(a).T
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g.T),))


def ssum(a, axis=None, keepdims=False):
    """Sum reduction."""
    t = _tape_of(a)
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if t is None:
        return out

    def vjp(g, shape=av.shape):
        if axis is None:
            return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).copy()

    return Var(out, t, ((a, vjp),))


def smean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(ssum(a, axis=axis), 1.0 / n)


def absval(a):
    t = _tape_of(a)
    av = value_of(a)
    out = np.abs(av)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * np.sign(av)),))


def sqrt(a):
    t = _tape_of(a)
    av = value_of(a)
    out = np.sqrt(av)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * (0.5 / out)),))


def square(a):
    return mul(a, a)


def sin(a):
    t = _tape_of(a)
    av = value_of(a)
    out = np.sin(av)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * np.cos(av)),))


def cos(a):
    t = _tape_of(a)
    av = value_of(a)
    out = np.cos(av)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: -g * np.sin(av)),))


def exp(a):
    t = _tape_of(a)
    out = np.exp(value_of(a))
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * out),))


def log(a):
    t = _tape_of(a)
    av = value_of(a)
    out = np.log(av)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g / av),))


def _sigmoid_np(u):
    z = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    t = _tape_of(a)
    out = _sigmoid_np(value_of(a))
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * out * (1.0 - out)),))


def _softplus_np(x, beta):
    # stable: max(x,0) + log1p(exp(-beta|x|)) / beta
    return np.maximum(x, 0.0) + np.log1p(np.exp(-beta * np.abs(x))) / beta


def softplus(a, beta=1.0):
    t = _tape_of(a)
    av = value_of(a)
    out = _softplus_np(av, beta)
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g * _sigmoid_np(beta * av)),))


def concat(parts, axis=1):
    t = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if t is None:
        return out
    edges = []
    off = 0
    for p, v in zip(parts, vals):
        n = v.shape[axis]
        if isinstance(p, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(off, off + n)
            edges.append((p, lambda g, sl=tuple(sl): g[sl]))
        off += n
    return Var(out, t, tuple(edges))


def cols(a, start, stop):
    """Column slice [start:stop) of a 2-d value."""
    t = _tape_of(a)
    av = value_of(a)
    out = av[:, start:stop]
    if t is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return full

    return Var(out, t, ((a, vjp),))


def take_rows(a, idx):
    """Row gather; the VJP scatter-adds (duplicate indices accumulate)."""
    idx = np.asarray(idx)
    t = _tape_of(a)
    av = value_of(a)
    out = av[idx]
    if t is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return Var(out, t, ((a, vjp),))


def broadcast_rows(a, n):
    """Tile a (1, d) row to (n, d); the VJP sums rows back."""
    t = _tape_of(a)
    av = value_of(a)
    out = np.broadcast_to(av, (n, av.shape[1])).copy()
    if t is None:
        return out
    return Var(out, t, ((a, lambda g: g.sum(axis=0, keepdims=True)),))


def l2norm_rows(a, eps=1e-30):
    """Per-row Euclidean norm of a 2-d value, shape (n, 1)."""
    return sqrt(add(ssum(square(a), axis=1, keepdims=True), eps))
