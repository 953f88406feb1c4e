"""Theory-driven models f_T(x; theta_T) and their rectangular priors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import Var, ops
from .diffcore.tensor import as_var, laplacian
from .errors import ConfigurationError


@dataclass(frozen=True)
class ThetaSample:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "names", tuple(self.names))
        if vals.size < 1 or len(self.names) != vals.size:
            raise ConfigurationError("theta needs one name per value and at least one value")
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("theta values must be finite")

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ThetaBox:
    lower: np.ndarray
    upper: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        names = tuple(self.names) or tuple(f"theta{i}" for i in range(lo.size))
        object.__setattr__(self, "names", names)
        if lo.shape != hi.shape or len(names) != lo.size:
            raise ConfigurationError("box bounds and names must have equal length")
        if not np.all(lo < hi):
            raise ConfigurationError(f"box needs lower < upper componentwise, got {lo}, {hi}")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, values, tol: float = 0.0) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return np.all((v >= self.lower - tol) & (v <= self.upper + tol), axis=-1)

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "names": list(self.names)}

    @classmethod
    def from_json(cls, d: dict) -> "ThetaBox":
        return cls(d["lower"], d["upper"], tuple(d.get("names", ())))


def sample_prior(box: ThetaBox, rng: np.random.Generator, size: int | None = None):
    """Componentwise uniform draw(s) from the box.

    With ``size=None`` a single :class:`ThetaSample` is returned, otherwise
    a raw (size, d_T) array.
    """
    if size is None:
        return ThetaSample(rng.uniform(box.lower, box.upper), box.names)
    return rng.uniform(box.lower, box.upper, size=(size, box.dim))


def clamp_to_box(theta, box: ThetaBox):
    if isinstance(theta, ThetaSample):
        return ThetaSample(np.clip(theta.values, box.lower, box.upper), theta.names)
    return np.clip(np.asarray(theta, dtype=np.float64), box.lower, box.upper)


def laplacian_5pt(field, dx: float):
    """(left + right + up + down - 4 center) / dx^2 with replicate boundaries.

    Works on plain arrays (returns an array) and on graph nodes.
    """
    if isinstance(field, Var):
        return laplacian(field, dx)
    return laplacian(np.asarray(field, dtype=np.float64), dx).value


class TheoryKind(str, enum.Enum):
    SINE = "sine"
    PENDULUM = "pendulum"
    DIFFUSION = "diffusion"
    LOTKA_VOLTERRA = "lotka_volterra"


_NAMES = {
    TheoryKind.SINE: ("a", "c"),
    TheoryKind.PENDULUM: ("g",),
    TheoryKind.DIFFUSION: ("a", "b"),
    TheoryKind.LOTKA_VOLTERRA: ("alpha", "beta", "gamma", "delta"),
}

DEFAULT_BOXES = {
    TheoryKind.SINE: ([0.0, -np.pi], [2.0, np.pi]),
    TheoryKind.PENDULUM: ([8.0], [12.0]),
    TheoryKind.DIFFUSION: ([0.001, 0.001], [0.002, 0.01]),
    TheoryKind.LOTKA_VOLTERRA: ([0.0, 0.0, 0.0, 0.0], [1.5, 3.0, 1.5, 3.0]),
}


@dataclass(frozen=True)
class TheoryModel:
    """One of the four theory families.

    ``dx`` is the grid spacing used by the diffusion model's Laplacian.
    """

    kind: TheoryKind
    dx: float = field(default=2.0 / 16)

    def __post_init__(self):
        object.__setattr__(self, "kind", TheoryKind(self.kind))

    @property
    def dim(self) -> int:
        return len(_NAMES[self.kind])

    @property
    def names(self) -> tuple[str, ...]:
        return _NAMES[self.kind]

    def default_box(self) -> ThetaBox:
        lo, hi = DEFAULT_BOXES[self.kind]
        return ThetaBox(lo, hi, self.names)

    def __call__(self, theta, state) -> Var:
        return eval_theory(self, theta, state)


def _theta_columns(theta: Var, batch_ndim: int, dim: int) -> list[Var]:
    """Split theta of shape (d,) or (B, d) into columns broadcastable against
    a state with ``batch_ndim`` trailing axes after the batch axis."""
    if theta.shape[-1] != dim:
        raise ConfigurationError(f"theta has dimension {theta.shape[-1]}, model needs {dim}")
    cols = []
    for i in range(dim):
        c = theta[..., i]
        if theta.ndim == 2:
            c = c.reshape((theta.shape[0],) + (1,) * batch_ndim)
        cols.append(c)
    return cols


def eval_theory(model: TheoryModel, theta, state) -> Var:
    """Evaluate f_T.

    ``theta`` is (d_T,) or per-instance (B, d_T). ``state`` layouts:
    sine (B, 1) or scalar input; pendulum (B, 2) as [angle from upright,
    angular velocity]; diffusion (B, 2, H, W) or (2, H, W); Lotka-Volterra
    (B, 2) as [prey, predator].
    """
    if isinstance(theta, ThetaSample):
        theta = theta.values
    theta = as_var(theta)
    state = as_var(state)
    kind = model.kind
    if kind is TheoryKind.SINE:
        a, c = _theta_columns(theta, max(state.ndim - 1, 0), 2)
        return a * ops.sin(state + c)
    if kind is TheoryKind.PENDULUM:
        _check_last(state, 2, kind)
        (g,) = _theta_columns(theta, 0, 1)
        angle, vel = state[..., 0], state[..., 1]
        return ops.stack([vel, 1.5 * g * ops.sin(angle)], axis=-1)
    if kind is TheoryKind.DIFFUSION:
        if state.ndim not in (3, 4) or state.shape[-3] != 2:
            raise ConfigurationError(f"diffusion state must be [2,H,W] or [B,2,H,W], got {state.shape}")
        a, b = _theta_columns(theta, 2, 2)
        lap = laplacian(state, model.dx)
        return ops.stack([a * lap[..., 0, :, :], b * lap[..., 1, :, :]], axis=-3)
    if kind is TheoryKind.LOTKA_VOLTERRA:
        _check_last(state, 2, kind)
        alpha, beta, gamma, delta = _theta_columns(theta, 0, 4)
        prey, pred = state[..., 0], state[..., 1]
        inter = prey * pred
        return ops.stack([alpha * prey - beta * inter, delta * inter - gamma * pred], axis=-1)
    raise ConfigurationError(f"unknown theory kind {kind}")


def _check_last(state: Var, n: int, kind) -> None:
    if state.shape[-1] != n:
        raise ConfigurationError(f"{kind.value} state needs last dimension {n}, got {state.shape}")


def make_box(lower: Sequence[float], upper: Sequence[float], names: Sequence[str] = ()) -> ThetaBox:
    return ThetaBox(np.asarray(lower, float), np.asarray(upper, float), tuple(names))
