"""GBCK checkpoints: a JSON header followed by a little-endian float64 payload."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..combinator import GreyBoxModel
from ..diffcore import OptState, ParamStore
from ..errors import ContractError
from ..training import Scheme, TrainConfig, TrainState

GBCK_MAGIC = b"GBCK"
GBCK_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


def encode_gbck(header: dict, tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    """Serialize; tensor order and shapes are recorded in the header."""
    head = dict(header)
    head["format_version"] = GBCK_VERSION
    head["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    text = json.dumps(head, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    return _PREAMBLE.pack(GBCK_MAGIC, GBCK_VERSION, len(text)) + text + payload


def decode_gbck(data: bytes, source: str = "checkpoint") -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(data) < _PREAMBLE.size:
        raise ContractError(f"{source} is too short to be a GBCK file")
    magic, version, size = _PREAMBLE.unpack_from(data)
    if magic != GBCK_MAGIC:
        raise ContractError(f"{source} is not a GBCK file")
    if version != GBCK_VERSION:
        raise ContractError(f"{source}: unsupported GBCK version {version}")
    start = _PREAMBLE.size
    header = json.loads(data[start:start + size].decode("utf-8"))
    if header.get("format_version") != GBCK_VERSION:
        raise ContractError(f"{source}: header version mismatch")
    off = start + size
    tensors = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ContractError(f"{source}: payload truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise ContractError(f"{source}: trailing bytes after payload")
    return header, tensors


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _finite_or_none(v: float):
    return None if not np.isfinite(v) else float(v)


@dataclass
class Checkpoint:
    """A trained grey-box model plus everything needed to resume its training."""

    model: dict
    params: ParamStore
    scheme: Scheme
    train_config: dict
    epochs_completed: int
    theta: np.ndarray | None = None
    opt: OptState | None = None
    best_params: ParamStore | None = None
    best_theta: np.ndarray | None = None
    best_valid: float = float("inf")
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, model: GreyBoxModel, config: TrainConfig, state: TrainState,
                      extra: dict | None = None) -> "Checkpoint":
        return cls(model.describe(), state.params.copy(), config.scheme, config.to_json(), state.epoch,
                   None if state.theta is None else np.array(state.theta), state.opt,
                   state.best_params, state.best_theta, state.best_valid, dict(extra or {}))

    def best(self) -> "Checkpoint":
        """The best-validation snapshot as a stand-alone (non-resumable) checkpoint."""
        if self.best_params is None:
            raise ContractError("checkpoint holds no best-validation snapshot")
        return Checkpoint(self.model, self.best_params.copy(), self.scheme, self.train_config,
                          self.epochs_completed, self.best_theta, None, None, None, self.best_valid,
                          dict(self.extra, snapshot="best"))

    def build_model(self) -> GreyBoxModel:
        return GreyBoxModel.from_description(self.model, self.params.copy())

    def config(self) -> TrainConfig:
        return TrainConfig.from_json(self.train_config)

    def train_state(self) -> TrainState:
        if self.opt is None:
            raise ContractError("checkpoint has no optimizer state and cannot be resumed")
        return TrainState(self.params.copy(), None if self.theta is None else self.theta.copy(),
                          self.opt, self.epochs_completed,
                          None if self.best_params is None else self.best_params.copy(),
                          None if self.best_theta is None else self.best_theta.copy(), self.best_valid)

    def to_bytes(self) -> bytes:
        tensors = OrderedDict()
        for k, v in self.params.items():
            tensors[f"param/{k}"] = v
        if self.theta is not None:
            tensors["theta"] = self.theta
        opt_keys = []
        if self.opt is not None:
            opt_keys = list(self.opt.exp_avg)
            for k in opt_keys:
                tensors[f"opt_m/{k}"] = self.opt.exp_avg[k]
                tensors[f"opt_v/{k}"] = self.opt.exp_avg_sq[k]
        if self.best_params is not None:
            for k, v in self.best_params.items():
                tensors[f"best/{k}"] = v
        if self.best_theta is not None:
            tensors["best_theta"] = self.best_theta
        header = {
            "kind": "greybox_model",
            "model": self.model,
            "scheme": self.scheme.value,
            "train_config": self.train_config,
            "config_hash": config_hash(self.train_config),
            "epochs_completed": self.epochs_completed,
            "optimizer": None if self.opt is None else {"step": self.opt.step, "keys": opt_keys},
            "best_valid": _finite_or_none(self.best_valid),
            "extra": self.extra,
        }
        return encode_gbck(header, tensors)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "checkpoint") -> "Checkpoint":
        header, tensors = decode_gbck(data, source)
        if header.get("kind") != "greybox_model":
            raise ContractError(f"{source} does not hold a grey-box model")
        params = ParamStore((k[6:], v) for k, v in tensors.items() if k.startswith("param/"))
        best = ParamStore((k[5:], v) for k, v in tensors.items() if k.startswith("best/"))
        opt = None
        if header["optimizer"] is not None:
            opt = OptState(header["optimizer"]["step"])
            for k in header["optimizer"]["keys"]:
                opt.exp_avg[k] = tensors[f"opt_m/{k}"]
                opt.exp_avg_sq[k] = tensors[f"opt_v/{k}"]
        bv = header["best_valid"]
        return cls(header["model"], params, Scheme(header["scheme"]), header["train_config"],
                   header["epochs_completed"], tensors.get("theta"), opt, best or None,
                   tensors.get("best_theta"), float("inf") if bv is None else bv, header["extra"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise ContractError(f"checkpoint {p} does not exist")
    return Checkpoint.from_bytes(p.read_bytes(), str(p))


__all__ = ["GBCK_MAGIC", "GBCK_VERSION", "Checkpoint", "encode_gbck", "decode_gbck", "config_hash",
           "save_checkpoint", "load_checkpoint"]
