"""Selecting theta_T after adaptive training: landscapes, point estimates, encoders, posteriors."""

from __future__ import annotations

import itertools
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffcore import GradTape, OptState, ParamStore, adam_step, backward, exponential_lr
from .diffcore.nn import init_mlp, mlp_forward
from .errors import ConfigurationError, ContractError, DivergenceError, EstimationDiverged
from .regularizers import RegSpec, parse_regspec, reg_from_parts
from .theory import ThetaBox, ThetaSample

QUANTITIES = ("R", "L", "NRMSE")


@dataclass(frozen=True)
class AxisSpec:
    index: int
    lower: float
    upper: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError("a grid axis needs at least 2 points")
        if not self.lower < self.upper:
            raise ConfigurationError("grid axis needs lower < upper")
        if self.index < 0:
            raise ConfigurationError("grid axis index must be non-negative")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n)

    def to_text(self) -> str:
        return f"{self.index}:{self.lower!r}:{self.upper!r}:{self.n}"

    @classmethod
    def parse(cls, text: str) -> "AxisSpec":
        parts = text.split(":")
        if len(parts) != 4:
            raise ConfigurationError(f"grid axis {text!r} must look like i:lo:hi:n")
        try:
            return cls(int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3]))
        except ValueError:
            raise ConfigurationError(f"grid axis {text!r} has a malformed number") from None


def parse_grid(text: str) -> list:
    axes = [AxisSpec.parse(t) for t in text.split(",") if t.strip()]
    if not 1 <= len(axes) <= 2:
        raise ConfigurationError("a grid has one or two axes")
    if len(axes) == 2 and axes[0].index == axes[1].index:
        raise ConfigurationError("grid axes must vary different coordinates")
    return axes


def full_box_axes(box: ThetaBox, indices, n: int) -> list:
    return [AxisSpec(i, float(box.lower[i]), float(box.upper[i]), n) for i in indices]


@dataclass
class LandscapeGrid:
    """Values of one quantity over a 1-D or 2-D grid of theta.

    ``values`` has shape (n0,) or (n0, n1); axis 0 varies slowest, so the
    linear cell index is row-major.
    """

    axes: list
    fixed: np.ndarray
    values: np.ndarray
    quantity: str = "R"
    label: str = ""

    @property
    def shape(self) -> tuple:
        return tuple(a.n for a in self.axes)

    def thetas(self) -> np.ndarray:
        return grid_thetas(self.axes, self.fixed)

    def cell_theta(self, flat_index: int) -> np.ndarray:
        return self.thetas()[flat_index]

    def argmin(self) -> int:
        return int(np.argmin(self.values.reshape(-1)))


@dataclass
class PosteriorGrid:
    axes: list
    fixed: np.ndarray
    probs: np.ndarray
    beta: float

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-np.sum(p * np.log(p)))


@dataclass
class GridEstimate:
    theta: ThetaSample
    index: int
    value: float
    grid: LandscapeGrid


def grid_thetas(axes: list, fixed) -> np.ndarray:
    """All cell theta vectors in row-major order, shape (cells, d)."""
    fixed = np.asarray(fixed, dtype=np.float64)
    for a in axes:
        if a.index >= fixed.size:
            raise ConfigurationError(f"grid axis {a.index} exceeds theta dimension {fixed.size}")
    mesh = np.meshgrid(*[a.points for a in axes], indexing="ij")
    cells = np.tile(fixed, (mesh[0].size, 1))
    for a, m in zip(axes, mesh):
        cells[:, a.index] = m.reshape(-1)
    return cells


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GREYBOX_THREADS", "1")))
    except ValueError:
        return 1


def _as_spec(regspec) -> RegSpec | None:
    if regspec is None or regspec == "":
        return None
    return parse_regspec(regspec) if isinstance(regspec, str) else regspec


def evaluate_cells(model, thetas: np.ndarray, batch_x, quantity: str = "R", regspec=None,
                   labels=None, params=None, max_values: int = 500_000) -> np.ndarray:
    """Forward-only value of ``quantity`` for each theta row over the whole batch.

    Cells are evaluated in chunks; each chunk stacks (cells x instances)
    into one forward pass with per-instance theta. A chunk holds at most
    ``max_values`` state scalars, counting every frame of an ODE rollout
    (at least one cell per chunk). This bounds memory for large states such
    as reaction-diffusion fields.
    """
    if quantity not in QUANTITIES:
        raise ConfigurationError(f"quantity must be one of {QUANTITIES}")
    spec = _as_spec(regspec)
    if quantity == "R" and spec is None:
        raise ConfigurationError("quantity R needs a regularizer expression")
    x = np.asarray(batch_x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ContractError("landscape needs a non-empty batch")
    if quantity != "R":
        if labels is None:
            raise ContractError(f"quantity {quantity} needs labels")
        labels = np.asarray(labels, dtype=np.float64)
        span = float(labels.max() - labels.min())
        if quantity == "NRMSE" and not span > 0:
            raise ContractError("labels have no spread; NRMSE is undefined")
    params = model.params if params is None else params
    frames = model.ode.horizon + 1 if model.ode is not None else 1
    per_chunk = max(1, max_values // (x.size * frames))
    chunks = [thetas[i:i + per_chunk] for i in range(0, len(thetas), per_chunk)]

    def run(th: np.ndarray) -> np.ndarray:
        g = th.shape[0]
        xr = np.broadcast_to(x, (g,) + x.shape).reshape((g * n,) + x.shape[1:])
        tr = np.repeat(th, n, axis=0)
        out = model.forward(params, tr, xr, with_parts=quantity == "R")
        if quantity == "R":
            f_t = out.f_t.value.reshape((g, n) + out.f_t.shape[1:])
            f_d = out.f_d.value.reshape((g, n) + out.f_d.shape[1:])
            return reg_from_parts(spec, f_t, f_d, th).value.reshape(g)
        pred = out.pred.value.reshape((g,) + labels.shape)
        mse = np.mean((pred - labels) ** 2, axis=tuple(range(1, pred.ndim)))
        return mse if quantity == "L" else np.sqrt(mse) / span

    workers = _workers()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def eval_landscape(model, regspec, axes: list, batch_x, quantity: str = "R", reference=None,
                   labels=None, params=None, max_values: int = 500_000) -> LandscapeGrid:
    """Evaluate ``quantity`` on a grid; coordinates not on an axis stay at ``reference``.

    Grids reaching outside the model's prior box only warn: the network was
    never trained there, but the evaluation is still well defined.
    """
    box = model.box
    fixed = (box.lower + box.upper) / 2 if reference is None else np.asarray(reference, dtype=np.float64)
    if isinstance(reference, ThetaSample):
        fixed = reference.values
    thetas = grid_thetas(axes, fixed)
    if not np.all(box.contains(thetas, tol=1e-12)):
        warnings.warn("landscape grid extends outside the prior box; the adaptive network is "
                      "extrapolating there", RuntimeWarning, stacklevel=2)
    values = evaluate_cells(model, thetas, batch_x, quantity, regspec, labels, params, max_values)
    if not np.all(np.isfinite(values)):
        raise ContractError("landscape produced non-finite values")
    spec = _as_spec(regspec)
    label = "" if spec is None else (regspec if isinstance(regspec, str) else "")
    return LandscapeGrid(list(axes), fixed.copy(), values.reshape([a.n for a in axes]), quantity, label)


def pairwise_slices(model, regspec, reference, n: int, batch_x, params=None) -> list:
    """One full-box 2-D grid per unordered coordinate pair, the rest held at ``reference``."""
    box = model.box
    if box.dim < 2:
        raise ConfigurationError("pairwise slices need at least two theta coordinates")
    ref = reference.values if isinstance(reference, ThetaSample) else np.asarray(reference, dtype=np.float64)
    return [eval_landscape(model, regspec, full_box_axes(box, (i, j), n), batch_x, reference=ref,
                           params=params)
            for i, j in itertools.combinations(range(box.dim), 2)]


def point_estimate_grid(model, regspec, batch_x, axes: list, reference=None, params=None) -> GridEstimate:
    """Grid cell with the smallest R; ties go to the lowest row-major index."""
    grid = eval_landscape(model, regspec, axes, batch_x, "R", reference, params=params)
    idx = grid.argmin()
    theta = grid.cell_theta(idx)
    return GridEstimate(ThetaSample(theta, model.box.names), idx, float(grid.values.reshape(-1)[idx]), grid)


def point_estimate_gradient(model, regspec, batch_x, theta_init, steps: int, lr: float,
                            lr_end: float | None = None, params=None) -> ThetaSample:
    """Adam (no weight decay) on R over theta with projection onto the box after every step."""
    spec = _as_spec(regspec)
    if spec is None:
        raise ConfigurationError("gradient point estimation needs a regularizer")
    box = model.box
    init = theta_init.values if isinstance(theta_init, ThetaSample) else theta_init
    store = ParamStore(theta=np.clip(np.asarray(init, dtype=np.float64).copy(), box.lower, box.upper))
    params = model.params if params is None else params
    x = np.asarray(batch_x, dtype=np.float64)
    state = OptState()
    for step in range(steps):
        tape = GradTape()
        pv = tape.watch(store)
        try:
            out = model.forward(params, pv["theta"], x)
            r = reg_from_parts(spec, out.f_t, out.f_d, pv["theta"])
        except DivergenceError as exc:
            raise EstimationDiverged(step, f"estimation diverged at step {step}: {exc}") from exc
        if not np.isfinite(r.item()):
            raise EstimationDiverged(step)
        grads = backward(tape, r)
        if "theta" not in grads:
            break
        rate = lr if lr_end is None else exponential_lr(lr, lr_end, step, steps)
        adam_step(store, grads, state, rate)
        np.clip(store["theta"], box.lower, box.upper, out=store["theta"])
    return ThetaSample(store["theta"].copy(), box.names)


# ---------------------------------------------------------------- amortized encoder

@dataclass
class EncoderConfig:
    hidden: tuple = (128, 128, 128)
    epochs: int = 50
    batch_size: int = 100
    lr_start: float = 1e-3
    lr_end: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("encoder needs epochs >= 0 and batch size >= 1")


@dataclass
class EncoderNet:
    """MLP h(x) -> theta whose output is squashed into the prior box."""

    box: ThetaBox
    layers: list
    params: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def create(cls, box: ThetaBox, in_dim: int, hidden, rng: np.random.Generator) -> "EncoderNet":
        layers = [in_dim, *hidden, box.dim]
        return cls(box, layers, init_mlp(rng, layers))

    def apply(self, pv, x):
        x = x if hasattr(x, "grad_fn") else np.asarray(x, dtype=np.float64)
        flat = x.reshape(x.shape[0], -1)
        z = mlp_forward(pv, flat, self.layers, activation="leaky_relu", out_activation="tanh")
        return (z + 1.0) * (0.5 * self.box.width) + self.box.lower

    def __call__(self, x) -> np.ndarray:
        return self.apply(self.params, x).value


def encoder_objective(model, spec: RegSpec, encoder: EncoderNet, enc_params, x, params=None):
    theta = encoder.apply(enc_params, x)
    out = model.forward(model.params if params is None else params, theta, x)
    return reg_from_parts(spec, out.f_t, out.f_d, theta)


def train_encoder(model, regspec, inputs, config: EncoderConfig = EncoderConfig(),
                  params=None) -> EncoderNet:
    """Fit h minimizing R(theta = h(x)) with the grey-box network frozen; Adam without decay."""
    spec = _as_spec(regspec)
    if spec is None:
        raise ConfigurationError("encoder training needs a regularizer")
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("encoder training needs inputs")
    rng = np.random.default_rng([config.seed, 7])
    enc = EncoderNet.create(model.box, int(np.prod(x.shape[1:])), config.hidden, rng)
    state = OptState()
    n = x.shape[0]
    for epoch in range(config.epochs):
        lr = exponential_lr(config.lr_start, config.lr_end, epoch, config.epochs)
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            xb = x[perm[start:start + config.batch_size]]
            tape = GradTape()
            pv = tape.watch(enc.params)
            try:
                r = encoder_objective(model, spec, enc, pv, xb, params)
            except DivergenceError as exc:
                raise EstimationDiverged(epoch, f"encoder training diverged in epoch {epoch}: {exc}") from exc
            if not np.isfinite(r.item()):
                raise EstimationDiverged(epoch)
            adam_step(enc.params, backward(tape, r), state, lr)
    return enc


# ---------------------------------------------------------------- posterior

def posterior_grid(landscape: LandscapeGrid, prior: ThetaBox, beta: float) -> PosteriorGrid:
    """Cell masses proportional to prior(theta) exp(-beta R(theta)), normalized over the grid."""
    if not beta >= 0:
        raise ConfigurationError("beta must be non-negative")
    r = np.asarray(landscape.values, dtype=np.float64).reshape(-1)
    inside = prior.contains(landscape.thetas(), tol=1e-12)
    usable = inside & np.isfinite(r)
    if not np.any(usable):
        raise ContractError("no grid cell has a finite value inside the prior box")
    logw = np.full(r.shape, -np.inf)
    logw[usable] = -beta * r[usable] if beta > 0 else 0.0
    logw -= logw[usable].max()
    w = np.exp(logw)
    probs = w / w.sum()
    return PosteriorGrid(list(landscape.axes), landscape.fixed.copy(), probs.reshape(landscape.values.shape),
                         float(beta))


__all__ = [
    "AxisSpec", "parse_grid", "full_box_axes", "LandscapeGrid", "PosteriorGrid", "GridEstimate",
    "grid_thetas", "evaluate_cells", "eval_landscape", "pairwise_slices", "point_estimate_grid",
    "point_estimate_gradient", "EncoderConfig", "EncoderNet", "encoder_objective", "train_encoder",
    "posterior_grid",
]
