"""Reverse-mode differentiation over numpy float64 arrays.

A :class:`Var` wraps an ndarray and remembers how it was produced. Only
nodes that depend on a watched leaf keep their parents, so evaluating a
model on plain constants builds no graph at all. Gradients are obtained
with :func:`backward`, which walks the graph once in reverse topological
order.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError

DTYPE = np.float64


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Var:
    """A node in the differentiation graph."""

    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, parents: tuple = (), grad_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE \
            else _asarray(value)
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Var(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else \
            float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    """Wrap a value as a graph leaf that is never differentiated."""
    return Var(x)


def make(value: np.ndarray, parents: Sequence[Var], grad_fn: Callable) -> Var:
    """Create an op result; the graph edge is kept only if a parent needs it."""
    if any(p.requires_grad for p in parents):
        return Var(value, tuple(parents), grad_fn, True)
    return Var(value)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
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


# tape -----------------------------------------------------------------------

class GradTape:
    """Records which named parameters are differentiated in one forward pass.

    A tape lives for a single mini-batch step::

        tape = GradTape()
        pv = tape.watch(params)
        loss = model_loss(pv, batch)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._names: dict[int, str] = {}
        self._leaves: "OrderedDict[str, Var]" = OrderedDict()

    def variable(self, name: str, value) -> Var:
        if name in self._leaves:
            raise ContractError(f"parameter {name!r} watched twice on one tape")
        v = Var(_asarray(value), requires_grad=True)
        self._names[id(v)] = name
        self._leaves[name] = v
        return v

    def watch(self, params: "OrderedDict[str, np.ndarray]", prefix: str = "") -> dict[str, Var]:
        return {k: self.variable(prefix + k, v) for k, v in params.items()}

    @property
    def leaves(self) -> "OrderedDict[str, Var]":
        return self._leaves

    def name_of(self, v: Var) -> str | None:
        return self._names.get(id(v))


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(tape: GradTape, loss: Var) -> "OrderedDict[str, np.ndarray]":
    """Exact reverse-mode gradient of a scalar ``loss``.

    Returns gradients for exactly the watched parameters that ``loss``
    depends on, in the order they were watched.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("backward() needs a scalar loss produced under the tape")
    found: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad_fn is None:
                name = tape.name_of(node)
                if name is not None:
                    found[name] = g
                continue
            for p, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in tape.leaves:
        if name in found:
            out[name] = np.array(found[name], dtype=DTYPE).reshape(tape.leaves[name].shape)
    return out


# elementwise binary ops -------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make(a.value + b.value, (a, b),
                lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make(a.value - b.value, (a, b),
                lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def grad_fn(g):
        return (unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return make(av * bv, (a, b), grad_fn)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv

    def grad_fn(g):
        return (unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None)

    return make(out, (a, b), grad_fn)


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    mask = a.value >= b.value
    return make(np.where(mask, a.value, b.value), (a, b),
                lambda g: (unbroadcast(g * mask, a.shape), unbroadcast(g * ~mask, b.shape)))


def minimum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    mask = a.value <= b.value
    return make(np.where(mask, a.value, b.value), (a, b),
                lambda g: (unbroadcast(g * mask, a.shape), unbroadcast(g * ~mask, b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    av, bv = a.value, b.value

    def grad_fn(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return make(av @ bv, (a, b), grad_fn)


# unary ops --------------------------------------------------------------------

def neg(a) -> Var:
    a = as_var(a)
    return make(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Var:
    a = as_var(a)
    av = a.value
    return make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return make(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return make(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return make(np.log(av), (a,), lambda g: (g / av,))


def sin(a) -> Var:
    a = as_var(a)
    av = a.value
    return make(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Var:
    a = as_var(a)
    av = a.value
    return make(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),))


def vabs(a) -> Var:
    a = as_var(a)
    sgn = np.sign(a.value)
    return make(np.abs(a.value), (a,), lambda g: (g * sgn,))


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Var:
    a = as_var(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return make(a.value * scale, (a,), lambda g: (g * scale,))


# reductions and shape ops -------------------------------------------------------

def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return vsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return make(np.broadcast_to(a.value, shape), (a,), lambda g: (unbroadcast(g, old),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx) -> Var:
    a = as_var(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def grad_fn(g):
        z = np.zeros(shape, dtype=DTYPE)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make(a.value[idx], (a,), grad_fn)


def concat(vs: Iterable, axis: int = -1) -> Var:
    vs = [as_var(v) for v in vs]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(np.concatenate([v.value for v in vs], axis=axis), vs, grad_fn)


def stack(vs: Iterable, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vs]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vs)))

    return make(np.stack([v.value for v in vs], axis=axis), vs, grad_fn)


def where(cond: np.ndarray, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    return make(np.where(cond, a.value, b.value), (a, b),
                lambda g: (unbroadcast(g * cond, a.shape), unbroadcast(g * ~cond, b.shape)))


# replicate-padded stencils ---------------------------------------------------------

def fold_replicate_pad(gpad: np.ndarray) -> np.ndarray:
    """Adjoint of one-cell replicate padding over the last two axes."""
    g = gpad.copy()
    g[..., 1, :] += g[..., 0, :]
    g[..., -2, :] += g[..., -1, :]
    g = g[..., 1:-1, :]
    g[..., :, 1] += g[..., :, 0]
    g[..., :, -2] += g[..., :, -1]
    return g[..., :, 1:-1]


def pad_replicate(x: np.ndarray) -> np.ndarray:
    width = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(x, width, mode="edge")


def _stencil(p: np.ndarray) -> np.ndarray:
    return (p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
            - 4.0 * p[..., 1:-1, 1:-1])


def laplacian(field, dx: float) -> Var:
    """Five-point Laplacian over the last two axes with replicate boundaries."""
    field = as_var(field)
    if field.ndim < 2 or field.shape[-1] < 3 or field.shape[-2] < 3:
        raise ContractError("laplacian needs a field of at least 3x3 cells")
    inv = 1.0 / (dx * dx)
    out = _stencil(pad_replicate(field.value)) * inv

    def grad_fn(g):
        gp = np.zeros(g.shape[:-2] + (g.shape[-2] + 2, g.shape[-1] + 2), dtype=DTYPE)
        gi = g * inv
        gp[..., :-2, 1:-1] += gi
        gp[..., 2:, 1:-1] += gi
        gp[..., 1:-1, :-2] += gi
        gp[..., 1:-1, 2:] += gi
        gp[..., 1:-1, 1:-1] -= 4.0 * gi
        return (fold_replicate_pad(gp),)

    return make(out, (field,), grad_fn)
