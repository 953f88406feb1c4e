"""JSON run configurations and bundled recipes."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from ..combinator import AdaptiveWiring, CombinatorKind, GreyBoxModel, OdeSettings
from ..errors import ConfigurationError
from ..theory import ThetaBox, TheoryKind, TheoryModel
from ..training import TrainConfig

SCHEMA_VERSION = 1

MODEL_KEYS = {"theory", "box", "kind", "x_dim", "hidden", "wiring", "fd_arch", "activation", "ode",
              "scale_hidden", "lap_scale", "encoder_hidden", "latent_window", "dx", "init_seed",
              "zero_output_init"}
RUN_KEYS = {"schema_version", "data", "model", "train", "pool_split", "description"}


def check_schema(cfg: dict, source: str) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{source}: configuration must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"{source}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg


def read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"configuration file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    return check_schema(cfg, str(p))


def recipe_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("greybox.cli.recipes").iterdir()
                  if p.name.endswith(".json"))


def load_recipe(name: str) -> dict:
    path = resources.files("greybox.cli.recipes") / f"{name}.json"
    if not path.is_file():
        raise ConfigurationError(f"unknown recipe {name!r}; available: {', '.join(recipe_names())}")
    return check_schema(json.loads(path.read_text()), f"recipe {name}")


def build_model(cfg: dict, data_meta: dict | None = None, seed: int = 0) -> GreyBoxModel:
    """Model from a partial description; unspecified fields take library defaults.

    Weights are initialized from ``init_seed`` when given, else from ``seed``.
    """
    unknown = set(cfg) - MODEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
    if "theory" not in cfg:
        raise ConfigurationError("model configuration needs a theory")
    try:
        kind = TheoryKind(cfg["theory"])
    except ValueError:
        raise ConfigurationError(f"unknown theory {cfg['theory']!r}") from None
    dx = cfg.get("dx")
    if dx is None:
        grid = ((data_meta or {}).get("spec") or {}).get("grid")
        dx = 2.0 / grid if kind is TheoryKind.DIFFUSION and grid else TheoryModel.__dataclass_fields__["dx"].default
    theory = TheoryModel(kind, dx=dx)
    box = ThetaBox.from_json(cfg["box"]) if cfg.get("box") else theory.default_box()
    kw = {k: cfg[k] for k in ("x_dim", "activation", "lap_scale", "latent_window", "fd_arch") if k in cfg}
    for k in ("hidden", "scale_hidden", "encoder_hidden"):
        if k in cfg:
            kw[k] = tuple(cfg[k])
    try:
        model = GreyBoxModel(theory, box, CombinatorKind(cfg.get("kind", "additive")),
                             wiring=AdaptiveWiring(**cfg.get("wiring", {})),
                             ode=OdeSettings(**cfg["ode"]) if cfg.get("ode") else None, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid model configuration: {exc}") from None
    model.init_params(np.random.default_rng(cfg.get("init_seed", seed)),
                      zero_output=bool(cfg.get("zero_output_init", False)))
    return model


def train_config(cfg: dict, model: GreyBoxModel, seed: int | None = None, lam: float | None = None) -> TrainConfig:
    d = dict(cfg)
    if seed is not None:
        d["seed"] = seed
    if lam is not None:
        d["lam"] = lam
    d.setdefault("box", model.box.to_json())
    d.setdefault("latent_dim", model.wiring.latent_dim)
    return TrainConfig.from_json(d)


def check_run(cfg: dict, source: str) -> dict:
    unknown = set(cfg) - RUN_KEYS
    if unknown:
        raise ConfigurationError(f"{source}: unknown keys {sorted(unknown)}")
    for key in ("model", "train"):
        if key not in cfg:
            raise ConfigurationError(f"{source}: missing {key!r} section")
    return cfg


__all__ = ["SCHEMA_VERSION", "read_json", "recipe_names", "load_recipe", "build_model", "train_config",
           "check_run", "check_schema"]
