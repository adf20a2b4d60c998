"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every node stores its value and a vector-Jacobian closure. Nodes are
appended in evaluation order, so parents always precede children and a
single reverse sweep over the tape computes all adjoints.

The module-level functions (``sin``, ``clip``, ``stack``...) are
polymorphic: given plain arrays they return plain arrays, given at least
one :class:`Var` they record a node. The environment dynamics rely on this
to share one implementation between the fast and the recorded paths.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

ABS_SMOOTHING = 1e-8
DIV_EPS = 1e-30
TWO_PI = 2.0 * math.pi

OP_KINDS = (
    "leaf", "add", "sub", "mul", "div", "neg", "sin", "cos", "tanh", "exp",
    "abs_smoothed", "square", "clip", "wrap_angle", "dot", "affine",
    "sum", "mean", "getitem", "reshape", "concat", "stack",
)


class TapeError(RuntimeError):
    """Misuse of a tape: cross-tape inputs or an output that is not on it."""


class Tape:
    """Append-only record of a computation."""

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.vjps: list[Callable | None] = []
        self.nonfinite: list[bool] = []

    def __len__(self):
        return len(self.values)

    def var(self, value) -> "Var":
        """Register a leaf (parameter or input)."""
        return self._push("leaf", (), np.array(value, dtype=float), None)

    def _push(self, kind, parents, value, vjp, flag=False) -> "Var":
        idx = len(self.values)
        self.kinds.append(kind)
        self.parents.append(parents)
        self.values.append(value)
        self.vjps.append(vjp)
        self.nonfinite.append(bool(flag) or not np.isfinite(value).all())
        return Var(self, idx)

    def record(self, kind: str, *inputs, **payload) -> "Var":
        """Record ``kind`` applied to ``inputs``; see :data:`OP_KINDS`."""
        if kind not in _DISPATCH:
            raise ValueError(f"unknown op kind {kind!r}")
        out = _DISPATCH[kind](*inputs, **payload)
        if not isinstance(out, Var) or out.tape is not self:
            raise TapeError("record() needs at least one input on this tape")
        return out

    def backward(self, output: "Var", seed=None) -> list:
        """Reverse sweep from ``output``; returns the adjoint of every node.

        ``seed`` defaults to 1 and must match the output shape otherwise.
        Nodes that do not influence ``output`` get ``None``.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output is not a node of this tape")
        out_val = self.values[output.index]
        if seed is None:
            if out_val.size != 1:
                raise TapeError("gradient of a non-scalar output needs an explicit seed")
            seed = np.ones_like(out_val)
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.broadcast_to(np.asarray(seed, dtype=float), out_val.shape).copy()
        for i in range(output.index, -1, -1):
            g = adj[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None:
                    continue
                if adj[p] is None:
                    # adjoints are never updated in place, so no copy is needed
                    adj[p] = gp
                else:
                    adj[p] = adj[p] + gp
        return adj

    def gradient(self, output: "Var", wrt: Sequence["Var"]) -> np.ndarray:
        """Flat gradient of a scalar ``output`` with respect to ``wrt``."""
        return np.concatenate([g.ravel() for g in self.gradients(output, wrt)])

    def gradients(self, output: "Var", wrt: Sequence["Var"], seed=None) -> list[np.ndarray]:
        """Per-leaf gradients, each shaped like its leaf."""
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise TapeError("wrt variable is not on this tape")
        adj = self.backward(output, seed)
        grads = []
        for w in wrt:
            g = adj[w.index] if w.index < len(adj) else None
            grads.append(np.zeros_like(self.values[w.index]) if g is None else np.array(g))
        return grads

    def jacobian(self, output: "Var", wrt: Sequence["Var"]) -> np.ndarray:
        """Dense Jacobian, one reverse sweep per output coordinate."""
        shape = self.values[output.index].shape
        n_out = int(np.prod(shape)) if shape else 1
        rows = []
        for k in range(n_out):
            seed = np.zeros(n_out)
            seed[k] = 1.0
            rows.append(np.concatenate(
                [g.ravel() for g in self.gradients(output, wrt, seed.reshape(shape))]
            ))
        return np.vstack(rows)


class Var:
    """Handle to a node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def nonfinite(self) -> bool:
        return self.tape.nonfinite[self.index]

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, value={self.value!r})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return dot(self, other)

    def __rmatmul__(self, other):
        return dot(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("inputs belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(kind, inputs, value, local_vjps, flag=False):
    """Record a node whose parents are the Var entries of ``inputs``.

    ``local_vjps[k]`` maps the output adjoint to the adjoint of ``inputs[k]``.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return value
    var_pos = [k for k, x in enumerate(inputs) if isinstance(x, Var)]
    parents = tuple(inputs[k].index for k in var_pos)
    funcs = [local_vjps[k] for k in var_pos]

    def vjp(g):
        return [f(g) for f in funcs]

    return tape._push(kind, parents, np.asarray(value, dtype=float), vjp, flag)


def _unary(kind, x, value, deriv):
    if not isinstance(x, Var):
        return value
    return _emit(kind, (x,), value, [lambda g: g * deriv])


# elementwise binary -------------------------------------------------------

def add(x, y):
    xv, yv = value_of(x), value_of(y)
    out = xv + yv
    return _emit("add", (x, y), out, [
        lambda g: _unbroadcast(g, xv.shape),
        lambda g: _unbroadcast(g, yv.shape),
    ])


def sub(x, y):
    xv, yv = value_of(x), value_of(y)
    out = xv - yv
    return _emit("sub", (x, y), out, [
        lambda g: _unbroadcast(g, xv.shape),
        lambda g: _unbroadcast(-g, yv.shape),
    ])


def mul(x, y):
    xv, yv = value_of(x), value_of(y)
    out = xv * yv
    return _emit("mul", (x, y), out, [
        lambda g: _unbroadcast(g * yv, xv.shape),
        lambda g: _unbroadcast(g * xv, yv.shape),
    ])


def div(x, y):
    xv, yv = value_of(x), value_of(y)
    flag = bool(np.any(np.abs(yv) < DIV_EPS))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = xv / yv
    if _tape_of((x, y)) is None:
        return out
    return _emit("div", (x, y), out, [
        lambda g: _unbroadcast(g / yv, xv.shape),
        lambda g: _unbroadcast(-g * out / yv, yv.shape),
    ], flag=flag)


# elementwise unary --------------------------------------------------------

def neg(x):
    xv = value_of(x)
    return _emit("neg", (x,), -xv, [lambda g: -g])


def sin(x):
    xv = value_of(x)
    return _unary("sin", x, np.sin(xv), np.cos(xv) if isinstance(x, Var) else None)


def cos(x):
    xv = value_of(x)
    return _unary("cos", x, np.cos(xv), -np.sin(xv) if isinstance(x, Var) else None)


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    return _unary("tanh", x, out, 1.0 - out * out if isinstance(x, Var) else None)


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    return _unary("exp", x, out, out)


def square(x):
    xv = value_of(x)
    return _unary("square", x, xv * xv, 2.0 * xv)


def abs_smoothed(x, eps: float = ABS_SMOOTHING):
    """``sqrt(x**2 + eps)``, a differentiable stand-in for ``|x|``."""
    xv = value_of(x)
    out = np.sqrt(xv * xv + eps)
    return _unary("abs_smoothed", x, out, xv / out if isinstance(x, Var) else None)


def clip(x, lo, hi):
    """Clip to ``[lo, hi]``; derivative 1 strictly inside, 0 elsewhere."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not isinstance(x, Var):
        return out
    inside = ((xv > lo) & (xv < hi)).astype(float)
    return _unary("clip", x, out, inside)


def wrap_angle(x):
    """Map angles to ``[-pi, pi)``; the wrap is a piecewise shift (derivative 1)."""
    xv = value_of(x)
    out = xv - TWO_PI * np.floor((xv + math.pi) / TWO_PI)
    if not isinstance(x, Var):
        return out
    return _emit("wrap_angle", (x,), out, [lambda g: g])


# linear algebra -----------------------------------------------------------

def dot(x, y):
    """Matrix product with ``np.matmul`` semantics for 1-D and 2-D operands."""
    xv, yv = value_of(x), value_of(y)
    out = xv @ yv
    if _tape_of((x, y)) is None:
        return out

    def gx(g):
        if yv.ndim == 1:
            return np.multiply.outer(g, yv) if xv.ndim > 1 else g * yv
        if xv.ndim == 1:
            return yv @ g
        return g @ np.swapaxes(yv, -1, -2)

    def gy(g):
        if xv.ndim == 1:
            return np.outer(xv, g) if yv.ndim > 1 else g * xv
        if yv.ndim == 1:
            return np.swapaxes(xv, -1, -2) @ g
        xm = xv.reshape(-1, xv.shape[-1])
        return xm.T @ g.reshape(-1, g.shape[-1])

    return _emit("dot", (x, y), out, [gx, gy])


def affine(x, w, b):
    """``x @ w + b`` for a batch ``x`` of shape (..., n_in)."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv + bv
    if _tape_of((x, w, b)) is None:
        return out
    lead = xv.shape[:-1]

    def gx(g):
        return g @ wv.T

    def gw(g):
        return xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    def gb(g):
        return _unbroadcast(g, bv.shape) if lead else g

    return _emit("affine", (x, w, b), out, [gx, gw, gb])


# reductions and shape -----------------------------------------------------

def vsum(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def g_in(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape)

    return _emit("sum", (x,), out, [g_in])


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    n = xv.size / max(np.size(out), 1)

    def g_in(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, xv.shape)

    return _emit("mean", (x,), out, [g_in])


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x, index):
    xv = value_of(x)
    out = xv[index]
    if not isinstance(x, Var):
        return out
    basic = _is_basic_index(index)

    def g_in(g):
        full = np.zeros_like(xv)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return _emit("getitem", (x,), np.array(out, dtype=float), [g_in])


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _emit("reshape", (x,), out, [lambda g: g.reshape(xv.shape)])


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if _tape_of(xs) is None:
        return out
    ax = axis % out.ndim
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def make(k):
        return lambda g: np.split(g, splits, axis=ax)[k]

    return _emit("concat", tuple(xs), out, [make(k) for k in range(len(xs))])


def stack(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if _tape_of(xs) is None:
        return out
    ax = axis % out.ndim

    def make(k):
        return lambda g: np.take(g, k, axis=ax)

    return _emit("stack", tuple(xs), out, [make(k) for k in range(len(xs))])


_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "sin": sin, "cos": cos, "tanh": tanh, "exp": exp,
    "abs_smoothed": abs_smoothed, "square": square, "clip": clip,
    "wrap_angle": wrap_angle, "dot": dot, "affine": affine,
    "sum": vsum, "mean": mean, "getitem": getitem, "reshape": reshape,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "stack": lambda *xs, axis=-1: stack(xs, axis=axis),
}


def gradient(tape: Tape, output: Var, wrt: Sequence[Var]) -> np.ndarray:
    return tape.gradient(output, wrt)


def jacobian(tape: Tape, output: Var, wrt: Sequence[Var]) -> np.ndarray:
    return tape.jacobian(output, wrt)
