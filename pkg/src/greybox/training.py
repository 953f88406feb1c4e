"""Inductive, transductive and adaptive (theta-marginalized) training loops."""

from __future__ import annotations

import enum
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .combinator import GreyBoxModel
from .diffcore import GradTape, OptState, ParamStore, Var, adamw_step, backward, exponential_lr, ops
from .diffcore.tensor import as_var
from .errors import ConfigurationError, ContractError, DivergenceError, TrainingDiverged
from .regularizers import max_coord_index, parse_regspec, reg_from_parts
from .theory import ThetaBox, clamp_to_box

THETA = "theta"


class Scheme(str, enum.Enum):
    INDUCTIVE = "inductive"
    TRANSDUCTIVE = "transductive"
    ADAPTIVE = "adaptive"


@dataclass
class Dataset:
    """Input/label pairs of one split.

    ``pool`` holds extra unlabeled inputs; ``theta`` holds per-instance
    ground-truth theory parameters when a synthetic generator knows them.
    """

    x: np.ndarray
    y: np.ndarray
    split: str = "train"
    pool: np.ndarray | None = None
    theta: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")
        if self.split not in ("train", "valid", "test"):
            raise ConfigurationError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class TrainConfig:
    scheme: Scheme = Scheme.ADAPTIVE
    epochs: int = 100
    batch_size: int = 10
    lr_start: float = 0.01
    lr_end: float = 0.0001
    lam: float = 0.0
    reg: str = ""
    box: ThetaBox | None = None
    m: int = 1
    seed: int = 0
    latent_dim: int = 0
    weight_decay: float = 0.01
    theta_init: tuple | None = None
    freeze_theta: bool = False
    valid_every: int = 0

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.batch_size < 1 or self.m < 1:
            raise ConfigurationError("batch size and m must be at least 1")
        if not self.lam >= 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.lam > 0 and not self.reg:
            raise ConfigurationError("lambda > 0 needs a regularizer expression")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ConfigurationError("learning rates must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["box"] = self.box.to_json() if self.box is not None else None
        d["theta_init"] = list(self.theta_init) if self.theta_init is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("box") is not None:
            d["box"] = ThetaBox.from_json(d["box"])
        if d.get("theta_init") is not None:
            d["theta_init"] = tuple(d["theta_init"])
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigurationError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    train_L: list = field(default_factory=list)
    train_R: list = field(default_factory=list)
    valid_L: list = field(default_factory=list)
    final_valid_L: float = float("nan")
    best_epoch: int = -1
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,L,R,valid_L\n")
        for i, e in enumerate(self.epochs):
            v = self.valid_L[i] if i < len(self.valid_L) else float("nan")
            buf.write(f"{e},{self.train_L[i]!r},{self.train_R[i]!r},{v!r}\n")
        return buf.getvalue()

    def extend(self, other: "TrainReport") -> None:
        for name in ("epochs", "train_L", "train_R", "valid_L"):
            getattr(self, name).extend(getattr(other, name))
        self.final_valid_L = other.final_valid_L
        if other.best_epoch >= 0:
            self.best_epoch = other.best_epoch


@dataclass
class TrainState:
    """Everything needed to continue a run where it stopped."""

    params: ParamStore
    theta: np.ndarray | None
    opt: OptState
    epoch: int
    best_params: ParamStore | None = None
    best_theta: np.ndarray | None = None
    best_valid: float = float("inf")


@dataclass
class TrainResult:
    params: ParamStore
    theta: np.ndarray | None
    report: TrainReport
    state: TrainState

    @property
    def best_params(self) -> ParamStore:
        return self.state.best_params if self.state.best_params is not None else self.params

    @property
    def best_theta(self):
        return self.state.best_theta if self.state.best_params is not None else self.theta


def mse_loss(pred, target) -> Var:
    pred = as_var(pred)
    target = np.asarray(target.value if isinstance(target, Var) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    d = pred - target
    return ops.mean(d * d)


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _initial_theta(model: GreyBoxModel, config: TrainConfig, box: ThetaBox) -> np.ndarray:
    if config.theta_init is not None:
        theta = np.asarray(config.theta_init, dtype=np.float64)
        if theta.shape != (box.dim,):
            raise ConfigurationError(f"theta_init needs {box.dim} values")
        return clamp_to_box(theta, box)
    rng = np.random.default_rng([config.seed, 2**32 - 1])
    return rng.uniform(box.lower, box.upper)


def _validation_theta(box: ThetaBox, seed: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2**32 - 2]).uniform(box.lower, box.upper, size=(n, box.dim))


def evaluate_loss(model: GreyBoxModel, theta, data: Dataset, params=None, batch_size: int = 512) -> float:
    """Forward-only MSE over a dataset at ``theta`` ((d,) or per-instance (n, d))."""
    params = model.params if params is None else params
    theta = np.asarray(theta, dtype=np.float64)
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        th = theta[sl] if theta.ndim == 2 else theta
        pred = model.forward(params, th, data.x[sl], with_parts=False).pred.value
        diff = pred - data.y[sl]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def fit(model: GreyBoxModel, train: Dataset, config: TrainConfig, valid: Dataset | None = None,
        pool: np.ndarray | None = None, resume: TrainState | None = None,
        stop_epoch: int | None = None) -> TrainResult:
    """Shared optimization loop behind all schemes.

    ``stop_epoch`` ends the run early while keeping the schedule of the
    full ``config.epochs``; the returned state can be passed as ``resume``.

    Mini-batches are reshuffled every epoch from an RNG seeded by
    (seed, epoch), as are the adaptive theta draws, so a resumed run
    retraces the uninterrupted one exactly.
    """
    scheme = config.scheme
    box = config.box if config.box is not None else model.box
    spec = parse_regspec(config.reg) if config.reg else None
    if spec is not None and max_coord_index(spec) >= box.dim:
        raise ConfigurationError("regularizer references a theta coordinate outside the box dimension")
    if len(train) == 0:
        raise ContractError("training set is empty")
    adaptive = scheme is Scheme.ADAPTIVE
    if adaptive and not model.wiring.include_theta:
        raise ConfigurationError("adaptive training needs theta wired into f_D")
    if scheme is Scheme.TRANSDUCTIVE:
        if pool is None or len(pool) == 0:
            raise ContractError("transductive training needs a non-empty unlabeled pool")
        pool = np.asarray(pool, dtype=np.float64)

    if resume is None:
        params = model.params.copy()
        theta = None if adaptive else _initial_theta(model, config, box)
        state = TrainState(params, theta, OptState(), 0)
    else:
        state = resume
        params = state.params
        theta = state.theta
    train_theta = not adaptive and not config.freeze_theta
    store = ParamStore(params)
    if train_theta:
        store[THETA] = theta
    valid_theta = _validation_theta(box, config.seed, len(valid)) if (valid is not None and adaptive) else None

    report = TrainReport(seed=config.seed, config=config.to_json())
    t0 = time.perf_counter()
    n = len(train)
    with_parts = spec is not None
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(state.epoch, end):
        lr = exponential_lr(config.lr_start, config.lr_end, epoch, config.epochs)
        rng = _epoch_rng(config.seed, epoch)
        perm = rng.permutation(n)
        pool_perm = _epoch_rng(config.seed, epoch).permutation(len(pool)) if pool is not None else None
        sum_l = sum_r = 0.0
        for step, idx in enumerate(_batches(n, config.batch_size, perm)):
            xb, yb = train.x[idx], train.y[idx]
            if adaptive and config.m > 1:
                xb, yb = np.repeat(xb, config.m, axis=0), np.repeat(yb, config.m, axis=0)
            tape = GradTape()
            pv = tape.watch(store)
            if adaptive:
                th = rng.uniform(box.lower, box.upper, size=(xb.shape[0], box.dim))
            else:
                th = pv[THETA] if train_theta else theta
            try:
                out = model.forward(pv, th, xb, with_parts=with_parts)
                loss_l = mse_loss(out.pred, yb)
                loss = loss_l
                loss_r = None
                if spec is not None:
                    if pool is not None:
                        pidx = pool_perm[(step * config.batch_size + np.arange(len(idx))) % len(pool)]
                        xp = pool[pidx]
                        pout = out if np.array_equal(xp, xb) else model.forward(pv, th, xp)
                        loss_r = reg_from_parts(spec, pout.f_t, pout.f_d, th)
                    else:
                        loss_r = reg_from_parts(spec, out.f_t, out.f_d, th)
                    if config.lam > 0:
                        loss = loss_l + loss_r * config.lam
            except DivergenceError as exc:
                raise TrainingDiverged(epoch, f"training diverged in epoch {epoch}: {exc}") from exc
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingDiverged(epoch)
            grads = backward(tape, loss)
            adamw_step(store, grads, state.opt, lr, weight_decay=config.weight_decay,
                       no_decay=frozenset([THETA]))
            if train_theta:
                np.clip(store[THETA], box.lower, box.upper, out=store[THETA])
            w = len(idx) / n
            sum_l += loss_l.item() * w
            sum_r += (loss_r.item() if loss_r is not None else 0.0) * w
        report.epochs.append(epoch)
        report.train_L.append(sum_l)
        report.train_R.append(sum_r)
        state.epoch = epoch + 1
        last = epoch == end - 1
        if valid is not None and (last or (config.valid_every and (epoch + 1) % config.valid_every == 0)):
            vl = evaluate_loss(model, valid_theta if adaptive else theta, valid, params)
            report.valid_L.append(vl)
            if vl < state.best_valid:
                state.best_valid = vl
                state.best_params = params.copy()
                state.best_theta = None if theta is None else theta.copy()
                report.best_epoch = epoch
            if last:
                report.final_valid_L = vl
        elif valid is not None:
            report.valid_L.append(float("nan"))
    report.wall_time = time.perf_counter() - t0
    model.params = params
    return TrainResult(params, None if theta is None else theta.copy(), report, state)


def train_inductive(model, data: Dataset, config: TrainConfig, valid=None, resume=None) -> TrainResult:
    """Joint minimization of L + lambda R with R on the training inputs."""
    if config.scheme is not Scheme.INDUCTIVE:
        raise ConfigurationError("train_inductive needs scheme 'inductive'")
    return fit(model, data, config, valid=valid, resume=resume)


def train_transductive(model, data: Dataset, unlabeled_pool, config: TrainConfig, valid=None,
                       resume=None) -> TrainResult:
    """Like the inductive scheme, but R is measured on a separate unlabeled pool."""
    if config.scheme is not Scheme.TRANSDUCTIVE:
        raise ConfigurationError("train_transductive needs scheme 'transductive'")
    return fit(model, data, config, valid=valid, pool=unlabeled_pool, resume=resume)


def train_adaptive(model, data: Dataset, config: TrainConfig, valid=None, resume=None) -> TrainResult:
    """Minimize E_theta[L + lambda R] with theta drawn per instance from the box.

    Only the network parameters are learned; the returned ``theta`` is None.
    """
    if config.scheme is not Scheme.ADAPTIVE:
        raise ConfigurationError("train_adaptive needs scheme 'adaptive'")
    return fit(model, data, config, valid=valid, resume=resume)


def train_latent_autoencoder(model, data: Dataset, config: TrainConfig, valid=None, resume=None):
    """Adaptive training of a sequence autoencoder whose f_D also reads z = encoder(x).

    Returns (f_D parameters, encoder parameters, result). With latent
    dimension 0 this is plain adaptive training and the encoder is empty.
    """
    if config.latent_dim != model.wiring.latent_dim:
        raise ConfigurationError("latent_dim differs between model and config")
    if model.ode is None or not model.ode.include_initial:
        raise ConfigurationError("latent autoencoder decodes from the window's first state")
    if data.x.shape != data.y.shape:
        raise ContractError("autoencoding needs x == y sequences")
    result = train_adaptive(model, data, config, valid=valid, resume=resume)
    fd = ParamStore((k, v) for k, v in result.params.items() if not k.startswith("enc."))
    enc = result.params.subset("enc.")
    return fd, enc, result


def train(model, data: Dataset, config: TrainConfig, valid=None, pool=None, resume=None) -> TrainResult:
    """Dispatch on ``config.scheme``."""
    if config.scheme is Scheme.TRANSDUCTIVE:
        return train_transductive(model, data, pool, config, valid, resume)
    if config.scheme is Scheme.INDUCTIVE:
        return train_inductive(model, data, config, valid, resume)
    return train_adaptive(model, data, config, valid, resume)


__all__ = [
    "Scheme", "Dataset", "TrainConfig", "TrainReport", "TrainState", "TrainResult", "mse_loss",
    "evaluate_loss", "fit", "train", "train_inductive", "train_transductive", "train_adaptive",
    "train_latent_autoencoder",
]
