"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive in execution order. Each recorded
:class:`Var` keeps its forward value, its parents and a vector-Jacobian
product closure; :meth:`Tape.backward` walks the record in exact reverse
order and accumulates gradients into the named parameter leaves.

Nodes are array-valued (a scalar is just a 0-d array), which keeps the tape
short enough to rebuild on every training step.
"""
from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """Misuse of the tape (backward before forward, foreign variables...)."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    __slots__ = ("value", "tape", "parents", "vjp", "name", "needs_grad", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape, parents=(), vjp=None, name=None, needs_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.needs_grad = needs_grad
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name, value):
        """Register a differentiable leaf bound to parameter ``name``."""
        if name in self.leaves:
            return self.leaves[name]
        v = Var(np.asarray(value, dtype=float), self, name=name, needs_grad=True)
        self.leaves[name] = v
        return v

    def params(self, store):
        """Leaves for every array in a :class:`ParamStore` (or mapping)."""
        return {name: self.param(name, arr) for name, arr in store.items()}

    def constant(self, value):
        return Var(np.asarray(value, dtype=float), self)

    def record(self, value, parents, vjp):
        """Append a primitive whose VJP maps the output cotangent to a tuple of
        parent cotangents (``None`` entries are skipped)."""
        parents = tuple(parents)
        needs = any(p.needs_grad for p in parents)
        v = Var(value, self, parents, vjp if needs else None, needs_grad=needs)
        if needs:
            v.index = len(self.nodes)
            self.nodes.append(v)
        return v

    def backward(self, output, output_grad=None, names=None):
        """Gradients of ``sum(output * output_grad)`` for every parameter leaf.

        Returns a dict keyed by parameter name; leaves that did not influence
        the output get zero arrays. ``names`` restricts/extends the returned
        key set (e.g. all names of a ParamStore).
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("backward: output was not recorded on this tape")
        if not self.leaves:
            raise TapeError("backward called before any forward recording")
        if output_grad is None:
            if output.value.size != 1:
                raise TapeError("backward: output_grad required for non-scalar output")
            output_grad = np.ones_like(output.value)
        output_grad = np.broadcast_to(np.asarray(output_grad, dtype=float), output.value.shape)
        grads: dict[int, np.ndarray] = {id(output): np.array(output_grad, dtype=float)}
        leaf_grads: dict[str, np.ndarray] = {}
        if output.name is not None and output.vjp is None:
            leaf_grads[output.name] = grads[id(output)]
        stop = output.index if output.vjp is not None else -1
        for node in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pg = node.vjp(g)
            for parent, gp in zip(node.parents, pg):
                if gp is None or not parent.needs_grad:
                    continue
                if parent.vjp is None:  # parameter leaf
                    if parent.name in leaf_grads:
                        leaf_grads[parent.name] = leaf_grads[parent.name] + gp
                    else:
                        leaf_grads[parent.name] = gp
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + gp
                    else:
                        grads[key] = gp
        keys = list(self.leaves) if names is None else list(names)
        out = {}
        for name in keys:
            if name in leaf_grads:
                out[name] = np.asarray(leaf_grads[name], dtype=float).reshape(self.leaves[name].value.shape)
            elif name in self.leaves:
                out[name] = np.zeros_like(self.leaves[name].value)
            else:
                raise TapeError(f"backward: unknown parameter {name!r}")
        return out


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("no Var among operands")


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.constant(x)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return t.record(av + bv, (_lift(t, a), _lift(t, b)),
                    lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return t.record(av - bv, (_lift(t, a), _lift(t, b)),
                    lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return t.record(av * bv, (_lift(t, a), _lift(t, b)),
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av / bv
    return t.record(out, (_lift(t, a), _lift(t, b)),
                    lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def power(a, p):
    """``a ** p`` for a constant exponent."""
    av = a.value
    return a.tape.record(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sin(a):
    av = a.value
    return a.tape.record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = a.value
    return a.tape.record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a):
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a):
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


# ----------------------------------------------------------------- reductions

def vsum(a, axis=None, keepdims=False):
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return vsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis=-1):
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a.tape.record(out, (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise TapeError("matmul: operands must be at least 2-D (reshape vectors first)")
    out = av @ bv

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return t.record(out, (a, b), vjp)


def einsum(subscripts, a, b):
    """Two-operand einsum without repeated indices inside one operand."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or not set(s) <= set(other) | set(out_s):
            raise TapeError(f"einsum: unsupported subscripts {subscripts!r}")
    av, bv = a.value, b.value
    out = np.einsum(subscripts, av, bv, optimize=True)

    def vjp(g):
        return (np.einsum(f"{out_s},{sb}->{sa}", g, bv, optimize=True),
                np.einsum(f"{out_s},{sa}->{sb}", g, av, optimize=True))

    return t.record(out, (a, b), vjp)


# ----------------------------------------------------------------- shape ops

def reshape(a, shape):
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    old = a.value.shape
    return a.tape.record(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, idx):
    shape = a.value.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return a.tape.record(a.value[idx], (a,), vjp)


def concat(xs, axis=-1):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    vals = [x.value for x in xs]
    ax = axis % vals[0].ndim
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]
    out = np.concatenate(vals, axis=ax)
    return t.record(out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(xs, axis=0):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    out = np.stack([x.value for x in xs], axis=axis)
    n = len(xs)
    return t.record(out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))
