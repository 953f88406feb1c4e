"""Grey-box composition C(f_T, f_D; x).

Two combinators are provided: a plain sum ``f_T(x) + f_D(...)`` and an
ODE whose vector field is that sum, integrated with fixed-step RK4 on the
differentiation graph. The data-driven part receives theta_T (and the
value of f_T) as extra inputs so a single network serves every theta in
the prior box.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .diffcore import ParamStore, Var, init_conv, init_mlp, mlp_forward, ops
from .diffcore.nn import conv2d_forward
from .diffcore.tensor import as_var, laplacian
from .errors import ConfigurationError, IntegrationDiverged
from .theory import ThetaBox, ThetaSample, TheoryKind, TheoryModel, eval_theory


class CombinatorKind(str, enum.Enum):
    ADDITIVE = "additive"
    ODE_ADDITIVE = "ode_additive"


class FDArch(str, enum.Enum):
    MLP = "mlp"
    CONV = "conv"


@dataclass(frozen=True)
class AdaptiveWiring:
    include_theta: bool = True
    include_ftheory: bool = True
    latent_dim: int = 0

    @property
    def include_latent(self) -> bool:
        return self.latent_dim > 0

    def input_width(self, x_dim: int, theta_dim: int, ft_dim: int) -> int:
        return (x_dim + self.latent_dim + (theta_dim if self.include_theta else 0)
                + (ft_dim if self.include_ftheory else 0))


@dataclass(frozen=True)
class OdeSettings:
    """Output frames are spaced ``dt`` apart; each frame interval is split
    into ``substeps`` RK4 steps. With ``include_initial`` the input is a
    window whose first frame is s_0, and s_0 is prepended to the prediction
    (autoencoding). A ``state_bound`` clips every state to [-bound, bound]
    after each RK4 step, which keeps quadratic fields from overflowing."""

    dt: float
    horizon: int
    substeps: int = 1
    include_initial: bool = False
    state_bound: float | None = None

    def __post_init__(self):
        if self.horizon < 1 or self.substeps < 1:
            raise ConfigurationError("ODE horizon and substeps must be >= 1")
        if self.state_bound is not None and not self.state_bound > 0:
            raise ConfigurationError("ODE state bound must be positive")
        if not self.dt > 0:
            raise ConfigurationError("ODE dt must be positive")


class Trajectory(NamedTuple):
    states: list
    times: np.ndarray

    def stacked(self, axis: int = 0) -> Var:
        return ops.stack(self.states, axis=axis)


class ModelOutput(NamedTuple):
    """Prediction plus f_T / f_D values at the evaluation points.

    ``f_t`` and ``f_d`` are (B, K, D): K points per instance (1 for the
    additive combinator, the data time grid for ODE models), D flattened
    output components. They are None when not requested.
    """

    pred: Var
    f_t: Var | None
    f_d: Var | None


# building blocks ---------------------------------------------------------------------

def _theta_rows(theta, batch: int) -> Var:
    if isinstance(theta, ThetaSample):
        theta = theta.values
    theta = as_var(theta)
    if theta.ndim == 1:
        theta = ops.broadcast_to(theta.reshape(1, -1), (batch, theta.shape[0]))
    return theta


def build_fd_input(x, theta, ftheory=None, latent=None,
                   wiring: AdaptiveWiring = AdaptiveWiring()) -> Var:
    """Concatenate [x; z; theta; f_T(x)] per the wiring flags."""
    x = as_var(x)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    batch = x.shape[0]
    parts = [x]
    if wiring.include_latent:
        if latent is None:
            raise ConfigurationError("wiring expects a latent vector but none was given")
        latent = as_var(latent)
        if latent.shape[-1] != wiring.latent_dim:
            raise ConfigurationError(f"latent width {latent.shape[-1]} != {wiring.latent_dim}")
        parts.append(latent)
    if wiring.include_theta:
        if theta is None:
            raise ConfigurationError("wiring expects theta but none was given")
        parts.append(_theta_rows(theta, batch))
    if wiring.include_ftheory:
        if ftheory is None:
            raise ConfigurationError("wiring expects the f_T value but none was given")
        ft = as_var(ftheory)
        parts.append(ft.reshape(batch, -1))
    return ops.concat(parts, axis=-1) if len(parts) > 1 else x


def odesolve_rk4(field: Callable, s0, t_end: float, n_steps: int, t0: float = 0.0,
                 bound: float | None = None) -> Trajectory:
    """Classical fixed-step RK4; every stage stays on the differentiation graph.

    With ``bound`` each new state is clipped to [-bound, bound]; clipped
    entries pass no gradient.
    """
    if n_steps < 1:
        raise ConfigurationError("odesolve_rk4 needs n_steps >= 1")
    s = as_var(s0)
    h = (t_end - t0) / n_steps
    times = t0 + h * np.arange(n_steps + 1)
    states = [s]
    for k in range(n_steps):
        t = times[k]
        k1 = field(s, t)
        k2 = field(s + (0.5 * h) * k1, t + 0.5 * h)
        k3 = field(s + (0.5 * h) * k2, t + 0.5 * h)
        k4 = field(s + h * k3, t + h)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if bound is not None:
            s = ops.minimum(ops.maximum(s, -bound), bound)
        if not np.all(np.isfinite(s.value)):
            raise IntegrationDiverged(k + 1)
        states.append(s)
    return Trajectory(states, times)


# the model -------------------------------------------------------------------------------

@dataclass
class GreyBoxModel:
    """f_T + adaptive f_D composed additively or as an ODE vector field.

    ``x_dim`` is the width of one state (or of x for the additive case);
    for the conv architecture it is the channel count. ``latent_window``
    is the number of frames fed to the latent encoder.
    """

    theory: TheoryModel
    box: ThetaBox
    kind: CombinatorKind = CombinatorKind.ADDITIVE
    x_dim: int = 1
    hidden: tuple = (16, 16)
    wiring: AdaptiveWiring = field(default_factory=AdaptiveWiring)
    fd_arch: FDArch = FDArch.MLP
    activation: str = "leaky_relu"
    ode: OdeSettings | None = None
    scale_hidden: tuple = (128, 128)
    lap_scale: float = 0.01
    encoder_hidden: tuple = (128, 128, 128)
    latent_window: int = 0
    params: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        self.kind = CombinatorKind(self.kind)
        self.fd_arch = FDArch(self.fd_arch)
        self.hidden = tuple(self.hidden)
        self.scale_hidden = tuple(self.scale_hidden)
        self.encoder_hidden = tuple(self.encoder_hidden)
        if self.box.dim != self.theory.dim:
            raise ConfigurationError("prior box dimension does not match the theory model")
        if self.kind is CombinatorKind.ODE_ADDITIVE and self.ode is None:
            raise ConfigurationError("ODE combinator needs OdeSettings")
        if self.fd_arch is FDArch.CONV and self.theory.kind is not TheoryKind.DIFFUSION:
            raise ConfigurationError("the conv architecture is only wired for the diffusion theory")
        if self.wiring.include_latent and self.latent_window < 1:
            raise ConfigurationError("latent wiring needs latent_window >= 1")

    # architecture -----------------------------------------------------------------------
    @property
    def ft_dim(self) -> int:
        return self.x_dim

    @property
    def fd_layers(self) -> list[int]:
        if self.fd_arch is FDArch.CONV:
            return [self.x_dim, *self.hidden, self.x_dim]
        width = self.wiring.input_width(self.x_dim, self.theory.dim, self.ft_dim)
        return [width, *self.hidden, self.x_dim]

    @property
    def scale_layers(self) -> list[int]:
        return [self.theory.dim, *self.scale_hidden, 2]

    @property
    def encoder_layers(self) -> list[int]:
        return [self.latent_window * self.x_dim, *self.encoder_hidden, self.wiring.latent_dim]

    def init_params(self, rng: np.random.Generator, zero_output: bool = False) -> ParamStore:
        """Draw fresh weights. With ``zero_output`` the last f_D layer starts at
        zero, so an ODE model begins as the pure theory field; quadratic
        fields such as Lotka-Volterra can overflow under a random f_D."""
        if self.fd_arch is FDArch.CONV:
            store = init_conv(rng, self.fd_layers, prefix="fd.")
            store.update(init_mlp(rng, self.scale_layers, prefix="scale."))
        else:
            store = init_mlp(rng, self.fd_layers, prefix="fd.")
        if zero_output:
            last = len(self.fd_layers) - 2
            for name in (f"fd.{last}.weight", f"fd.{last}.bias"):
                store[name] = np.zeros_like(store[name])
        if self.wiring.include_latent:
            store.update(init_mlp(rng, self.encoder_layers, prefix="enc."))
        self.params = store
        return store

    def describe(self) -> dict:
        return {
            "theory": self.theory.kind.value,
            "dx": self.theory.dx,
            "box": self.box.to_json(),
            "kind": self.kind.value,
            "x_dim": self.x_dim,
            "hidden": list(self.hidden),
            "wiring": asdict(self.wiring),
            "fd_arch": self.fd_arch.value,
            "activation": self.activation,
            "ode": asdict(self.ode) if self.ode else None,
            "scale_hidden": list(self.scale_hidden),
            "lap_scale": self.lap_scale,
            "encoder_hidden": list(self.encoder_hidden),
            "latent_window": self.latent_window,
        }

    @classmethod
    def from_description(cls, d: dict, params: ParamStore | None = None) -> "GreyBoxModel":
        return cls(
            theory=TheoryModel(TheoryKind(d["theory"]), dx=d["dx"]),
            box=ThetaBox.from_json(d["box"]),
            kind=CombinatorKind(d["kind"]),
            x_dim=d["x_dim"],
            hidden=tuple(d["hidden"]),
            wiring=AdaptiveWiring(**d["wiring"]),
            fd_arch=FDArch(d["fd_arch"]),
            activation=d["activation"],
            ode=OdeSettings(**d["ode"]) if d["ode"] else None,
            scale_hidden=tuple(d["scale_hidden"]),
            lap_scale=d["lap_scale"],
            encoder_hidden=tuple(d["encoder_hidden"]),
            latent_window=d["latent_window"],
            params=params if params is not None else ParamStore(),
        )

    # evaluation -------------------------------------------------------------------------
    def _pv(self, pv):
        return self.params if pv is None else pv

    def encode_latent(self, pv, x) -> Var | None:
        if not self.wiring.include_latent:
            return None
        x = as_var(x)
        flat = x.reshape(x.shape[0], -1)
        return mlp_forward(self._pv(pv), flat, self.encoder_layers, self.activation, prefix="enc.")

    def f_theory(self, theta, s) -> Var:
        return eval_theory(self.theory, theta, s)

    def f_data(self, pv, s, theta, ft=None, latent=None) -> Var:
        pv = self._pv(pv)
        if self.fd_arch is FDArch.CONV:
            return _conv_fd(self, pv, s, theta)
        inp = build_fd_input(s, theta, ft, latent, self.wiring)
        return mlp_forward(pv, inp, self.fd_layers, self.activation, prefix="fd.")

    def parts(self, pv, theta, s, latent=None) -> tuple[Var, Var]:
        ft = self.f_theory(theta, s)
        return ft, self.f_data(pv, s, theta, ft, latent)

    def forward(self, pv, theta, x, latent=None, with_parts: bool = True) -> ModelOutput:
        """Predict from x under ``theta`` ((d_T,) shared or (B, d_T) per instance)."""
        pv = self._pv(pv)
        x = as_var(x)
        if isinstance(theta, ThetaSample):
            theta = theta.values
        if self.wiring.include_latent and latent is None:
            latent = self.encode_latent(pv, x)
        if self.kind is CombinatorKind.ADDITIVE:
            ft, fd = self.parts(pv, theta, x, latent)
            pred = ft + fd
            if not with_parts:
                return ModelOutput(pred, None, None)
            b = x.shape[0]
            return ModelOutput(pred, ft.reshape(b, 1, -1), fd.reshape(b, 1, -1))
        return self._forward_ode(pv, theta, x, latent, with_parts)

    def _forward_ode(self, pv, theta, x, latent, with_parts):
        ode = self.ode
        s0 = x[:, 0] if ode.include_initial else x
        field_fn = grey_vector_field(self, theta, latent, pv)
        traj = odesolve_rk4(field_fn, s0, ode.horizon * ode.dt, ode.horizon * ode.substeps,
                            bound=ode.state_bound)
        frames = traj.states[ode.substeps::ode.substeps]
        if ode.include_initial:
            frames = [s0] + frames
        pred = ops.stack(frames, axis=1)
        if not with_parts:
            return ModelOutput(pred, None, None)
        grid = traj.states[0:ode.horizon * ode.substeps:ode.substeps]
        T, B = len(grid), s0.shape[0]
        s_all = ops.stack(grid, axis=0).reshape((T * B,) + s0.shape[1:])
        th = as_var(theta)
        if th.ndim == 2:
            th = ops.concat([th] * T, axis=0)
        lat = ops.concat([latent] * T, axis=0) if latent is not None else None
        ft, fd = self.parts(pv, th, s_all, lat)
        ft = ops.transpose(ft.reshape(T, B, -1), (1, 0, 2))
        fd = ops.transpose(fd.reshape(T, B, -1), (1, 0, 2))
        return ModelOutput(pred, ft, fd)

    def predict(self, theta, x) -> np.ndarray:
        return self.forward(None, theta, x, with_parts=False).pred.value


def _conv_fd(model: GreyBoxModel, pv, s, theta) -> Var:
    """Free conv branch plus theta-scaled Laplacian branch."""
    s = as_var(s)
    single = s.ndim == 3
    if single:
        s = s.reshape((1,) + s.shape)
    b = s.shape[0]
    th = _theta_rows(theta, b)
    free = conv2d_forward(pv, s, model.fd_layers, activation=model.activation, prefix="fd.")
    lo, width = model.box.lower, model.box.width
    th_unit = (th - lo) * (2.0 / width) - 1.0
    raw = mlp_forward(pv, th_unit, model.scale_layers, model.activation, out_activation="tanh",
                      prefix="scale.")
    k = lap_branch_scalars(raw * model.lap_scale, th)
    lap = laplacian(s, model.theory.dx)
    out = free + lap * k.reshape(b, 2, 1, 1)
    return out.reshape(out.shape[1:]) if single else out


def lap_branch_scalars(scaled, theta) -> Var:
    """Lower-clip the Laplacian-branch scalars at -theta/2 so f_D cannot
    fully cancel the theory's diffusion."""
    return ops.maximum(as_var(scaled), -0.5 * as_var(theta))


# functional surface ---------------------------------------------------------------------

def combine_additive(model: GreyBoxModel, theta, x, pv=None, latent=None) -> Var:
    if model.kind is not CombinatorKind.ADDITIVE:
        raise ConfigurationError("combine_additive needs an additive model")
    return model.forward(pv, theta, x, latent, with_parts=False).pred


def grey_vector_field(model: GreyBoxModel, theta, latent=None, pv=None) -> Callable:
    """Closure (s, t) -> f_T(s; theta) + f_D(wired input); time is not an input."""
    if model.kind is not CombinatorKind.ODE_ADDITIVE:
        raise ConfigurationError("grey_vector_field needs an ODE model")
    pv = model._pv(pv)
    if isinstance(theta, ThetaSample):
        theta = theta.values

    def field_fn(s, t=0.0):
        ft, fd = model.parts(pv, theta, s, latent)
        return ft + fd

    return field_fn


def grey_conv_field(model: GreyBoxModel, theta, pv=None) -> Callable:
    if model.fd_arch is not FDArch.CONV:
        raise ConfigurationError("grey_conv_field needs the conv architecture")
    return grey_vector_field(model, theta, None, pv)


def zero_fd_params(model: GreyBoxModel) -> ParamStore:
    """Parameters for which f_D is identically zero (testing helper)."""
    store = model.init_params(np.random.default_rng(0))
    for k, v in store.items():
        if k.startswith("fd.") or k.startswith("scale."):
            v[...] = 0.0
    return store


__all__ = [
    "AdaptiveWiring", "CombinatorKind", "FDArch", "GreyBoxModel", "ModelOutput", "OdeSettings",
    "Trajectory", "build_fd_input", "combine_additive", "grey_conv_field", "grey_vector_field",
    "lap_branch_scalars", "odesolve_rk4", "zero_fd_params",
]
