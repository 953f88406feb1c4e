"""Deterministic synthetic benchmarks, the NRMSE metric and the GBDS dataset format."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, GenerationError
from .theory import DEFAULT_BOXES, TheoryKind, laplacian_5pt
from .training import Dataset

SPLITS = ("train", "valid", "test")


class Benchmark(str, enum.Enum):
    TOY = "toy"
    PENDULUM = "pendulum"
    REACTION_DIFFUSION = "reaction_diffusion"
    PREDATOR_PREY = "predator_prey"


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ConfigurationError(f"unsupported noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ConfigurationError("noise sigma must be non-negative")


@dataclass(frozen=True)
class PendulumGains:
    """Swing-up regulator: energy pumping far from upright, PD near it.

    u = w u_pd + (1 - w) u_energy with w = ((1 + cos angle) / 2) ** blend_power.
    """

    energy: float = 0.3
    kp: float = 40.0
    kd: float = 10.0
    blend_power: float = 8.0


_DEFAULT_SIZES = {
    Benchmark.TOY: (40, 40, 40),
    Benchmark.PENDULUM: (3600, 2700, 2700),
    Benchmark.PREDATOR_PREY: (1200, 400, 400),
}


@dataclass
class GenSpec:
    benchmark: Benchmark
    sizes: tuple | None = None
    noise: float | None = None
    seed: int = 0
    # pendulum
    g: float = 10.0
    dt: float = 0.05
    horizon: int = 10
    episode_steps: int = 100
    substeps: int = 10
    gains: PendulumGains = field(default_factory=PendulumGains)
    control: bool = True
    # reaction-diffusion
    grid: int = 16
    frames: int = 16
    frame_dt: float = 0.1
    step: float = 0.001
    # predator-prey
    window: int = 11
    episode_days: int = 60
    theta_fraction: tuple = (0.25, 0.75)
    forcing: float = 0.05
    max_value: float = 7.0

    def __post_init__(self):
        self.benchmark = Benchmark(self.benchmark)
        if isinstance(self.gains, dict):
            self.gains = PendulumGains(**self.gains)
        if self.sizes is None:
            if self.benchmark is Benchmark.REACTION_DIFFUSION:
                self.sizes = (100, 50, 50) if self.grid == 16 else (400, 300, 300)
            else:
                self.sizes = _DEFAULT_SIZES[self.benchmark]
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) != 3 or min(self.sizes) < 1:
            raise ConfigurationError("sizes needs three counts, each at least 1")
        if self.noise is None:
            self.noise = {Benchmark.TOY: 0.1, Benchmark.PREDATOR_PREY: 0.02}.get(self.benchmark, 0.0)
        NoiseSpec(sigma=self.noise)
        if self.benchmark is Benchmark.REACTION_DIFFUSION and self.grid not in (16, 32):
            raise ConfigurationError("reaction-diffusion grid must be 16 or 32")

    def to_json(self) -> dict:
        d = asdict(self)
        d["benchmark"] = self.benchmark.value
        d["sizes"] = list(self.sizes)
        d["theta_fraction"] = list(self.theta_fraction)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GenSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown generator keys: {sorted(unknown)}")
        if "benchmark" not in d:
            raise ConfigurationError("generator spec needs a benchmark")
        try:
            Benchmark(d["benchmark"])
        except ValueError:
            raise ConfigurationError(f"unknown benchmark {d['benchmark']!r}") from None
        if "theta_fraction" in d:
            d["theta_fraction"] = tuple(d["theta_fraction"])
        return cls(**d)


def _rng(spec: GenSpec, split: int, item: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, split, item])


def _rk4(f, s, h):
    k1 = f(s)
    k2 = f(s + 0.5 * h * k1)
    k3 = f(s + 0.5 * h * k2)
    k4 = f(s + h * k3)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------- toy

def toy_target(x):
    return np.sin(x) + np.cos(x)


def gen_toy(spec: GenSpec) -> dict:
    """x ~ U[-pi, pi], y = sin x + cos x + N(0, sigma^2)."""
    out = {}
    for i, (name, n) in enumerate(zip(SPLITS, spec.sizes)):
        rng = _rng(spec, i)
        x = rng.uniform(-np.pi, np.pi, size=(n, 1))
        y = toy_target(x) + rng.normal(0.0, spec.noise, size=(n, 1))
        out[name] = Dataset(x, y, name)
    return out


# ---------------------------------------------------------------- pendulum

def pendulum_control(state: np.ndarray, g: float, gains: PendulumGains) -> np.ndarray:
    angle, vel = state[..., 0], state[..., 1]
    energy = 0.5 * vel * vel + 1.5 * g * np.cos(angle)
    u_energy = gains.energy * (1.5 * g - energy) * vel
    u_pd = -gains.kp * np.sin(angle) - gains.kd * vel
    w = ((1.0 + np.cos(angle)) / 2.0) ** gains.blend_power
    return w * u_pd + (1.0 - w) * u_energy


def pendulum_field(g: float, gains: PendulumGains | None):
    def f(s):
        acc = 1.5 * g * np.sin(s[..., 0])
        if gains is not None:
            acc = acc + pendulum_control(s, g, gains)
        return np.stack([s[..., 1], acc], axis=-1)
    return f


def simulate_pendulum(s0: np.ndarray, spec: GenSpec, steps: int | None = None) -> np.ndarray:
    """Integrate from s0 of shape (E, 2); returns (E, steps, 2) sampled every dt.

    The regulator acts continuously inside the integrator; RK4 runs with
    ``spec.substeps`` sub-steps per sample.
    """
    steps = spec.episode_steps if steps is None else steps
    f = pendulum_field(spec.g, spec.gains if spec.control else None)
    h = spec.dt / spec.substeps
    s = np.asarray(s0, dtype=np.float64)
    out = [s]
    for k in range(1, steps):
        for _ in range(spec.substeps):
            s = _rk4(f, s, h)
        if not np.all(np.isfinite(s)):
            raise GenerationError(f"pendulum simulation diverged at sample {k}")
        out.append(s)
    return np.stack(out, axis=1)


def _sliding_pairs(episodes: np.ndarray, horizon: int):
    """(E, T, ...) episodes -> x = s_t, y = (s_{t+1}, ..., s_{t+horizon})."""
    E, T = episodes.shape[:2]
    xs, ys = [], []
    for t in range(T - horizon):
        xs.append(episodes[:, t])
        ys.append(episodes[:, t + 1:t + 1 + horizon])
    x = np.stack(xs, axis=1).reshape((E * (T - horizon),) + episodes.shape[2:])
    y = np.stack(ys, axis=1).reshape((E * (T - horizon), horizon) + episodes.shape[2:])
    return x, y


def gen_pendulum(spec: GenSpec) -> dict:
    """Controlled pendulum windows; sizes are rounded up to whole episodes, then trimmed."""
    per_episode = spec.episode_steps - spec.horizon
    if per_episode < 1:
        raise ConfigurationError("episode_steps must exceed the horizon")
    out = {}
    for i, (name, n) in enumerate(zip(SPLITS, spec.sizes)):
        n_ep = -(-n // per_episode)
        rng = _rng(spec, i)
        s0 = np.stack([rng.uniform(-np.pi, np.pi, n_ep), rng.uniform(-1.0, 1.0, n_ep)], axis=-1)
        episodes = simulate_pendulum(s0, spec)
        if spec.noise > 0:
            episodes = episodes + rng.normal(0.0, spec.noise, size=episodes.shape)
        x, y = _sliding_pairs(episodes, spec.horizon)
        out[name] = Dataset(x[:n], y[:n], name)
    return out


# ---------------------------------------------------------------- reaction-diffusion

RD_DIFFUSION = (0.0015, 0.005)
RD_SOURCE = 0.005


def rd_field(dx: float, diffusion=RD_DIFFUSION):
    a, b = diffusion

    def f(s):
        u, v = s[:, 0], s[:, 1]
        du = a * laplacian_5pt(u, dx) + u - u * u * u - v + RD_SOURCE
        dv = b * laplacian_5pt(v, dx) + u - v
        return np.stack([du, dv], axis=1)
    return f


def smooth_initial_fields(rng: np.random.Generator, count: int, n: int, modes: int = 4) -> np.ndarray:
    """Sums of ``modes`` random low-frequency cosines per field, min-max scaled to [-0.5, 0.5]."""
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    X, Y = np.meshgrid(c, c, indexing="ij")
    out = np.zeros((count, 2, n, n))
    for i in range(count):
        for ch in range(2):
            f = np.zeros((n, n))
            for _ in range(modes):
                kx, ky = rng.integers(0, 3, size=2)
                amp = rng.normal()
                phase = rng.uniform(0, 2 * np.pi)
                f += amp * np.cos(np.pi * (kx * X + ky * Y) / 2.0 + phase)
            lo, hi = f.min(), f.max()
            out[i, ch] = (f - lo) / (hi - lo) - 0.5 if hi > lo else 0.0
    return out


def simulate_rd(s0: np.ndarray, spec: GenSpec, step: float | None = None) -> np.ndarray:
    """(B, 2, N, N) initial fields -> (B, frames, 2, N, N), frame 0 being s0."""
    step = spec.step if step is None else step
    per_frame = int(round(spec.frame_dt / step))
    if not np.isclose(per_frame * step, spec.frame_dt):
        raise ConfigurationError("frame spacing must be a multiple of the generator step")
    f = rd_field(2.0 / s0.shape[-1])
    s = np.asarray(s0, dtype=np.float64)
    frames = [s]
    k = 0
    for _ in range(1, spec.frames):
        for _ in range(per_frame):
            s = _rk4(f, s, step)
            k += 1
        if not np.all(np.isfinite(s)):
            raise GenerationError(f"reaction-diffusion field became non-finite by step {k}")
        frames.append(s)
    return np.stack(frames, axis=1)


def gen_reaction_diffusion(spec: GenSpec) -> dict:
    """x = s_0, y = (s_1, ..., s_{frames-1})."""
    out = {}
    for i, (name, n) in enumerate(zip(SPLITS, spec.sizes)):
        s0 = smooth_initial_fields(_rng(spec, i), n, spec.grid)
        seq = simulate_rd(s0, spec)
        if spec.noise > 0:
            seq = seq + _rng(spec, i, 1).normal(0.0, spec.noise, size=seq.shape)
        out[name] = Dataset(seq[:, 0], seq[:, 1:], name)
    return out


# ---------------------------------------------------------------- predator-prey

PP_SCALE = (0.5, 0.02)


def lv_forced_field(theta: np.ndarray, forcing: float, period: float = 12.0):
    """Lotka-Volterra plus a small periodic term on the prey growth, batched over episodes.

    ``theta`` is (E, 4); time enters only through the forcing.
    """
    alpha, beta, gamma, delta = (theta[:, i] for i in range(4))

    def f(s, t):
        p, q = s[:, 0], s[:, 1]
        dp = alpha * p - beta * p * q + forcing * np.sin(2 * np.pi * t / period) * p
        dq = delta * p * q - gamma * q
        return np.stack([dp, dq], axis=1)
    return f


def simulate_lv(theta: np.ndarray, s0: np.ndarray, days: int, forcing: float = 0.0,
                substeps: int = 100) -> np.ndarray:
    """Daily samples (E, days, 2) of the forced system, RK4 with ``substeps`` steps per day."""
    f = lv_forced_field(np.atleast_2d(theta), forcing)
    h = 1.0 / substeps
    s, t = np.asarray(s0, dtype=np.float64), 0.0
    out = [s]
    for _ in range(1, days):
        for _ in range(substeps):
            k1 = f(s, t)
            k2 = f(s + 0.5 * h * k1, t + 0.5 * h)
            k3 = f(s + 0.5 * h * k2, t + 0.5 * h)
            k4 = f(s + h * k3, t + h)
            s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out.append(s)
    return np.stack(out, axis=1)


def _windows(seq: np.ndarray, length: int) -> np.ndarray:
    return np.stack([seq[t:t + length] for t in range(seq.shape[0] - length + 1)])


def gen_predator_prey(spec: GenSpec, max_retries: int = 50) -> dict:
    """Windows x = y of length ``window`` from forced LV episodes with log-normal noise.

    Each split also carries the per-window ground-truth ``theta`` so that
    recovery of the per-episode parameters can be scored.
    """
    lo, hi = np.array(DEFAULT_BOXES[TheoryKind.LOTKA_VOLTERRA])
    f0, f1 = spec.theta_fraction
    sub_lo, sub_hi = lo + f0 * (hi - lo), lo + f1 * (hi - lo)
    out = {}
    for i, (name, n) in enumerate(zip(SPLITS, spec.sizes)):
        xs, thetas = [], []
        episode = 0
        while sum(len(x) for x in xs) < n:
            for attempt in range(max_retries):
                rng = _rng(spec, i, episode * max_retries + attempt)
                theta = rng.uniform(sub_lo, sub_hi)
                # start near the coexistence point (gamma/delta, alpha/beta)
                eq = np.array([theta[2] / theta[3], theta[0] / theta[1]])
                s0 = eq * rng.uniform(0.5, 1.5, size=2)
                seq = simulate_lv(theta[None], s0[None], spec.episode_days, spec.forcing)[0]
                if np.all(np.isfinite(seq)) and seq.min() > 1e-9:
                    break
            else:
                raise GenerationError(f"predator-prey episode {episode} went extinct {max_retries} times")
            if spec.noise > 0:
                seq = seq * np.exp(rng.normal(0.0, spec.noise, size=seq.shape))
            w = _windows(seq, spec.window)
            keep = np.all(w <= spec.max_value, axis=(1, 2))
            xs.append(w[keep])
            thetas.append(np.repeat(theta[None], keep.sum(), axis=0))
            episode += 1
        x = np.concatenate(xs)[:n]
        out[name] = Dataset(x, x.copy(), name, theta=np.concatenate(thetas)[:n])
    return out


def load_raw_predator_prey(path, window: int = 11, max_value: float = 7.0,
                           scale=PP_SCALE) -> np.ndarray:
    """Read a CSV with columns day, prey, predator and return scaled windows.

    Densities are multiplied by ``scale``; windows holding any value above
    ``max_value`` after scaling are dropped.
    """
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.shape[1] < 3:
        raise ContractError("raw predator-prey CSV needs columns day, prey, predator")
    seq = raw[:, 1:3] * np.asarray(scale)
    w = _windows(seq, window)
    return w[np.all(w <= max_value, axis=(1, 2))]


GENERATORS = {
    Benchmark.TOY: gen_toy,
    Benchmark.PENDULUM: gen_pendulum,
    Benchmark.REACTION_DIFFUSION: gen_reaction_diffusion,
    Benchmark.PREDATOR_PREY: gen_predator_prey,
}


def generate(spec: GenSpec) -> dict:
    return GENERATORS[spec.benchmark](spec)


# ---------------------------------------------------------------- metric

def nrmse(pred, target) -> float:
    """Root-mean-squared error divided by the target's value range."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shapes differ: {pred.shape} vs {target.shape}")
    span = float(target.max() - target.min())
    if not span > 0:
        raise ContractError("target has no spread; NRMSE is undefined")
    return float(np.sqrt(np.mean((pred - target) ** 2)) / span)


# ---------------------------------------------------------------- GBDS files

GBDS_MAGIC = b"GBDS"
GBDS_VERSION = 1


def _write_arrays(path: Path, arrays: list) -> None:
    with open(path, "wb") as fh:
        fh.write(GBDS_MAGIC)
        fh.write(struct.pack("<II", GBDS_VERSION, len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_arrays(path: Path) -> list:
    data = Path(path).read_bytes()
    if data[:4] != GBDS_MAGIC:
        raise ContractError(f"{path} is not a GBDS file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != GBDS_VERSION:
        raise ContractError(f"{path}: unsupported GBDS version {version}")
    off = 12
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}Q", data, off))
        off += 8 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(data):
        raise ContractError(f"{path}: trailing or missing payload bytes")
    return arrays


def save_dataset(datasets: dict, directory, spec: GenSpec | None = None) -> None:
    """Write ``meta.json`` plus ``<split>.gbds`` per split.

    Each split file holds x, y and, when present, the ground-truth theta.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format": "GBDS", "version": GBDS_VERSION, "spec": spec.to_json() if spec else None,
            "splits": {}}
    for name, ds in datasets.items():
        arrays = [ds.x, ds.y] + ([ds.theta] if ds.theta is not None else [])
        _write_arrays(d / f"{name}.gbds", arrays)
        meta["splits"][name] = {"x": list(ds.x.shape), "y": list(ds.y.shape),
                                "theta": list(ds.theta.shape) if ds.theta is not None else None}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> tuple[dict, dict]:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise ContractError(f"{d} has no meta.json")
    meta = json.loads(meta_path.read_text())
    out = {}
    for name in meta["splits"]:
        arrays = _read_arrays(d / f"{name}.gbds")
        out[name] = Dataset(arrays[0], arrays[1], name, theta=arrays[2] if len(arrays) > 2 else None)
    return out, meta


__all__ = [
    "Benchmark", "NoiseSpec", "PendulumGains", "GenSpec", "toy_target", "gen_toy", "gen_pendulum",
    "gen_reaction_diffusion", "gen_predator_prey", "generate", "nrmse", "pendulum_control",
    "simulate_pendulum", "simulate_rd", "simulate_lv", "smooth_initial_fields",
    "load_raw_predator_prey", "save_dataset", "load_dataset",
]
