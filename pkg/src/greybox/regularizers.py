"""Composable regularizer expressions over the theory and data-driven parts.

Every leaf is a batch mean, so the weight lambda does not depend on batch
size. Parts arrive as (..., B, K, D) arrays: B instances, K evaluation
points per instance (1 for additive models, the data time grid for ODE
models) and D output components. Leading axes are kept, which lets a
landscape evaluate many theta cells in one call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .diffcore import Var, ops
from .diffcore.tensor import as_var
from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class NormD:
    pass


@dataclass(frozen=True)
class Corr:
    pass


@dataclass(frozen=True)
class NormDif:
    pass


@dataclass(frozen=True)
class CoordQuad:
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ConfigurationError("coord2 index must be non-negative")


@dataclass(frozen=True)
class Sum:
    terms: tuple


@dataclass(frozen=True)
class Product:
    factors: tuple


@dataclass(frozen=True)
class Scale:
    coefficient: float
    expr: "RegSpec"

    def __post_init__(self):
        if not math.isfinite(self.coefficient):
            raise ConfigurationError("scale coefficient must be finite")


RegSpec = Union[NormD, Corr, NormDif, CoordQuad, Sum, Product, Scale]
LEAF_TYPES = (NormD, Corr, NormDif, CoordQuad)


class RegSyntaxError(ConfigurationError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass
class RegValue:
    scalar: float
    breakdown: dict
    var: Var | None = None


# ---------------------------------------------------------------- text form

_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<sym>[()+*,]))")


def _tokenize(text: str):
    pos, out = 0, []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = len(text) - len(text[pos:].lstrip())
            raise RegSyntaxError(f"unexpected character {text[bad]!r}", bad)
        start = m.start(m.lastgroup)
        out.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        tok = self.toks[self.i]
        if (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = tok[1] or "end of input"
            raise RegSyntaxError(f"expected {want!r}, found {got!r}", tok[2])
        self.i += 1
        return tok

    def expr(self):
        terms = [self.term()]
        while self.peek()[1] == "+" and self.peek()[0] == "sym":
            self.take()
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else Sum(tuple(terms))

    def term(self):
        factors = [self.factor()]
        while self.peek()[1] == "*":
            self.take()
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else Product(tuple(factors))

    def factor(self):
        kind, val, pos = self.peek()
        if kind == "sym" and val == "(":
            self.take()
            inner = self.expr()
            self.take("sym", ")")
            return inner
        if kind != "name":
            raise RegSyntaxError(f"expected a regularizer term, found {val or 'end of input'!r}", pos)
        self.take()
        name = val.lower()
        if name == "normd":
            return NormD()
        if name == "corr":
            return Corr()
        if name == "normdif":
            return NormDif()
        if name == "coord2":
            self.take("sym", "(")
            k, num, npos = self.take("num")
            if not re.fullmatch(r"\d+", num):
                raise RegSyntaxError("coord2 needs a non-negative integer index", npos)
            self.take("sym", ")")
            return CoordQuad(int(num))
        if name == "scale":
            self.take("sym", "(")
            _, num, _ = self.take("num")
            self.take("sym", ",")
            inner = self.expr()
            self.take("sym", ")")
            return Scale(float(num), inner)
        raise RegSyntaxError(f"unknown regularizer {val!r}", pos)


def parse_regspec(text: str) -> RegSpec:
    p = _Parser(text)
    spec = p.expr()
    kind, val, pos = p.peek()
    if kind != "end":
        raise RegSyntaxError(f"unexpected {val!r}", pos)
    return spec


def format_regspec(spec: RegSpec) -> str:
    """Canonical text. ``parse_regspec(format_regspec(s)) == s`` for every tree."""
    if isinstance(spec, NormD):
        return "normd"
    if isinstance(spec, Corr):
        return "corr"
    if isinstance(spec, NormDif):
        return "normdif"
    if isinstance(spec, CoordQuad):
        return f"coord2({spec.index})"
    if isinstance(spec, Scale):
        return f"scale({spec.coefficient!r}, {format_regspec(spec.expr)})"
    if isinstance(spec, Sum):
        return " + ".join(_wrap(t, Sum) for t in spec.terms)
    if isinstance(spec, Product):
        return " * ".join(_wrap(f, (Sum, Product)) for f in spec.factors)
    raise ConfigurationError(f"not a regularizer expression: {spec!r}")


def _wrap(child, paren_types) -> str:
    text = format_regspec(child)
    return f"({text})" if isinstance(child, paren_types) else text


def leaves(spec: RegSpec) -> list:
    if isinstance(spec, LEAF_TYPES):
        return [spec]
    if isinstance(spec, Scale):
        return leaves(spec.expr)
    children = spec.terms if isinstance(spec, Sum) else spec.factors
    out = []
    for c in children:
        for leaf in leaves(c):
            if leaf not in out:
                out.append(leaf)
    return out


def max_coord_index(spec: RegSpec) -> int:
    idx = [leaf.index for leaf in leaves(spec) if isinstance(leaf, CoordQuad)]
    return max(idx) if idx else -1


# ---------------------------------------------------------------- evaluation

def _leaf_value(leaf, f_t: Var, f_d: Var, theta: Var | None) -> Var:
    axes = (-2, -1)  # instances and evaluation points, after summing components
    if isinstance(leaf, NormD):
        return ops.mean(ops.vsum(f_d * f_d, axis=-1), axis=axes)
    if isinstance(leaf, Corr):
        return ops.vabs(ops.mean(ops.vsum(f_t * f_d, axis=-1), axis=axes))
    if isinstance(leaf, NormDif):
        return ops.vabs(ops.mean(ops.vsum(f_t * f_t - f_d * f_d, axis=-1), axis=axes))
    if isinstance(leaf, CoordQuad):
        if theta is None or leaf.index >= theta.shape[-1]:
            raise ConfigurationError(f"coord2({leaf.index}) is out of range for the theta dimension")
        c = theta[..., leaf.index]
        sq = c * c
        if theta.ndim == f_t.ndim - 1:
            # per-instance theta (..., B, d): average over instances
            sq = ops.mean(sq, axis=-1)
        return sq
    raise ConfigurationError(f"unknown leaf {leaf!r}")


def _combine(spec: RegSpec, values: dict) -> Var:
    if isinstance(spec, LEAF_TYPES):
        return values[spec]
    if isinstance(spec, Scale):
        return _combine(spec.expr, values) * spec.coefficient
    if isinstance(spec, Sum):
        out = _combine(spec.terms[0], values)
        for t in spec.terms[1:]:
            out = out + _combine(t, values)
        return out
    out = _combine(spec.factors[0], values)
    for f in spec.factors[1:]:
        out = out * _combine(f, values)
    return out


def reg_from_parts(spec: RegSpec, f_t, f_d, theta=None, with_breakdown: bool = False):
    """Evaluate R from model parts of shape (..., B, K, D).

    ``theta`` is (..., d) for a shared value or (..., B, d) per instance; it
    is only read by coord2 leaves. Returns a graph node holding R for each
    leading index, plus the per-leaf values if ``with_breakdown``.
    """
    f_t, f_d = as_var(f_t), as_var(f_d)
    if f_t.shape != f_d.shape or f_t.ndim < 3:
        raise ContractError(f"parts must share a (..., B, K, D) shape, got {f_t.shape} and {f_d.shape}")
    if f_t.shape[-3] == 0 or f_t.shape[-2] == 0:
        raise ContractError("regularizer needs a non-empty batch")
    th = as_var(theta) if theta is not None else None
    values = {leaf: _leaf_value(leaf, f_t, f_d, th) for leaf in leaves(spec)}
    total = _combine(spec, values)
    if with_breakdown:
        return total, values
    return total


def eval_reg(spec: RegSpec, model, theta, batch_x, pv=None, latent=None) -> RegValue:
    """R of ``model`` at ``theta`` on the inputs ``batch_x``. Labels are never read."""
    batch_x = as_var(batch_x)
    if batch_x.ndim == 0 or batch_x.shape[0] == 0:
        raise ContractError("regularizer needs a non-empty batch")
    if hasattr(theta, "values") and not isinstance(theta, np.ndarray):
        theta = theta.values
    out = model.forward(pv, theta, batch_x, latent=latent)
    total, values = reg_from_parts(spec, out.f_t, out.f_d, theta, with_breakdown=True)
    breakdown = {format_regspec(k): float(v.value) for k, v in values.items()}
    return RegValue(float(total.value), breakdown, total)


__all__ = [
    "NormD", "Corr", "NormDif", "CoordQuad", "Sum", "Product", "Scale", "RegSpec", "RegValue",
    "RegSyntaxError", "parse_regspec", "format_regspec", "leaves", "max_coord_index",
    "reg_from_parts", "eval_reg",
]
