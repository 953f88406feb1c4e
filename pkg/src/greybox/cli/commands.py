"""Implementations behind the ``greybox`` subcommands.

Each command reads its inputs, does the work through the library modules,
and writes every output file from this single thread after the results are
gathered.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..datagen import GenSpec, generate, load_dataset, save_dataset
from ..diffcore import ParamStore
from ..errors import ConfigurationError, ContractError
from ..postestim import (EncoderConfig, EncoderNet, eval_landscape, full_box_axes, parse_grid,
                         point_estimate_grid, point_estimate_gradient, posterior_grid, train_encoder)
from ..regularizers import eval_reg, parse_regspec
from ..theory import ThetaBox
from ..training import Scheme, evaluate_loss, fit, train_latent_autoencoder
from .checkpoint import Checkpoint, decode_gbck, encode_gbck, load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, build_model, check_run, train_config
from .export import write_grid_files

LAMBDA_SWEEP = (0.001, 0.005, 0.01, 0.05, 0.1)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot create output directory {d}: {exc}") from None
    return d


def _load_data(path):
    if path is None:
        raise ConfigurationError("no dataset directory given (use --data or the config's 'data' key)")
    return load_dataset(path)


# ---------------------------------------------------------------- generate

def cmd_generate(spec: GenSpec, out) -> dict:
    datasets = generate(spec)
    save_dataset(datasets, _out_dir(out), spec)
    return {name: (ds.x.shape, ds.y.shape) for name, ds in datasets.items()}


# ---------------------------------------------------------------- train

def _adaptive_test_theta(box: ThetaBox, seed: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2**32 - 3]).uniform(box.lower, box.upper, size=(n, box.dim))


def run_training(run: dict, datasets: dict, meta: dict, seed: int | None = None, lam: float | None = None,
                 resume: Checkpoint | None = None, stop_epoch: int | None = None):
    """Train one model from a run configuration; returns (model, config, result)."""
    if resume is not None:
        model = resume.build_model()
        config = resume.config()
        state = resume.train_state()
    else:
        check_run(run, "run configuration")
        init_seed = seed if seed is not None else run["train"].get("seed", 0)
        model = build_model(run["model"], meta, init_seed)
        config = train_config(run["train"], model, seed, lam)
        state = None
    train = datasets["train"]
    valid = datasets.get("valid")
    pool = None
    if config.scheme is Scheme.TRANSDUCTIVE:
        split = (run or {}).get("pool_split", "test") if resume is None else resume.extra.get("pool_split", "test")
        if split not in datasets:
            raise ContractError(f"pool split {split!r} is missing from the dataset")
        pool = datasets[split].x
    if model.wiring.include_latent:
        if stop_epoch is not None or resume is not None:
            result = fit(model, train, config, valid=valid, resume=state, stop_epoch=stop_epoch)
        else:
            result = train_latent_autoencoder(model, train, config, valid=valid)[2]
    else:
        result = fit(model, train, config, valid=valid, pool=pool, resume=state, stop_epoch=stop_epoch)
    return model, config, result


def training_metrics(model, config, result, datasets: dict) -> dict:
    metrics = {
        "scheme": config.scheme.value,
        "epochs_completed": result.state.epoch,
        "final_train_L": result.report.train_L[-1] if result.report.train_L else None,
        "final_train_R": result.report.train_R[-1] if result.report.train_R else None,
        "best_epoch": result.report.best_epoch,
        "theta": None if result.theta is None else result.theta.tolist(),
    }
    valid_l = result.report.final_valid_L
    metrics["final_valid_L"] = None if not np.isfinite(valid_l) else valid_l
    test = datasets.get("test")
    if test is not None:
        if result.theta is None:
            theta = _adaptive_test_theta(model.box, config.seed, len(test))
        else:
            theta = result.theta
        metrics["test_L"] = evaluate_loss(model, theta, test)
    return metrics


def cmd_train(run: dict, out, data=None, seed=None, lam=None, resume_path=None, stop_epoch=None) -> dict:
    resume = load_checkpoint(resume_path) if resume_path else None
    data_dir = data or (resume.extra.get("data") if resume else None) or (run or {}).get("data")
    datasets, meta = _load_data(data_dir)
    model, config, result = run_training(run, datasets, meta, seed, lam, resume, stop_epoch)
    d = _out_dir(out)
    extra = {"data": str(data_dir)}
    if config.scheme is Scheme.TRANSDUCTIVE:
        extra["pool_split"] = (run or {}).get("pool_split", "test") if resume is None \
            else resume.extra.get("pool_split", "test")
    ckpt = Checkpoint.from_training(model, config, result.state, extra)
    save_checkpoint(d / "final.gbck", ckpt)
    if ckpt.best_params is not None:
        save_checkpoint(d / "best.gbck", ckpt.best())
    (d / "report.csv").write_text(result.report.to_csv())
    metrics = training_metrics(model, config, result, datasets)
    _write_json(d / "metrics.json", metrics)
    return metrics


def cmd_train_sweep(run: dict, out, data=None, seed=None, lambdas=LAMBDA_SWEEP) -> dict:
    out = _out_dir(out)
    return {lam: cmd_train(run, out / f"lambda_{lam:g}", data, seed, lam) for lam in lambdas}


# ---------------------------------------------------------------- landscape / estimate

def _adaptive_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.scheme is not Scheme.ADAPTIVE:
        raise ContractError(f"checkpoint was trained with the {ckpt.scheme.value} scheme; landscapes need "
                            "an adaptive model, whose f_D responds to theta")
    return ckpt, ckpt.build_model()


def _split(datasets: dict, name: str):
    if name not in datasets:
        raise ContractError(f"split {name!r} not found; available: {sorted(datasets)}")
    return datasets[name]


def _axes(model, grid: str | None, n: int = 51) -> list:
    if grid:
        return parse_grid(grid)
    return full_box_axes(model.box, range(min(2, model.box.dim)), n)


def _reference(model, text: str | None) -> np.ndarray:
    if not text:
        return (model.box.lower + model.box.upper) / 2
    ref = np.array([float(t) for t in text.split(",")])
    if ref.size != model.box.dim:
        raise ConfigurationError(f"reference needs {model.box.dim} values")
    return ref


def cmd_landscape(checkpoint, reg, out, data=None, split="test", grid=None, quantity="R",
                  reference=None, threshold=None) -> dict:
    ckpt, model = _adaptive_model(checkpoint)
    datasets, _ = _load_data(data or ckpt.extra.get("data"))
    ds = _split(datasets, split)
    axes = _axes(model, grid)
    land = eval_landscape(model, reg if quantity == "R" else None, axes, ds.x, quantity,
                          _reference(model, reference), labels=ds.y)
    d = _out_dir(out)
    write_grid_files(d, "landscape", land.values, axes, land.fixed, quantity, reg or "")
    idx = land.argmin()
    summary = {"quantity": quantity, "argmin_index": idx, "argmin_theta": land.cell_theta(idx).tolist(),
               "min": float(land.values.reshape(-1)[idx]), "max": float(land.values.max())}
    if threshold is not None:
        summary["threshold"] = threshold
        summary["all_below_threshold"] = bool(np.all(land.values <= threshold))
    _write_json(d / "landscape.json", summary)
    return summary


def save_encoder(path, enc: EncoderNet) -> None:
    header = {"kind": "theta_encoder", "layers": enc.layers, "box": enc.box.to_json()}
    Path(path).write_bytes(encode_gbck(header, OrderedDict(enc.params)))


def load_encoder(path) -> EncoderNet:
    header, tensors = decode_gbck(Path(path).read_bytes(), str(path))
    if header.get("kind") != "theta_encoder":
        raise ContractError(f"{path} does not hold a theta encoder")
    return EncoderNet(ThetaBox.from_json(header["box"]), header["layers"], ParamStore(tensors))


def cmd_estimate(checkpoint, reg, method, out, data=None, split="test", grid=None, beta=1.0, steps=100,
                 lr=1e-3, lr_end=None, init=None, encoder: EncoderConfig | None = None) -> dict:
    ckpt, model = _adaptive_model(checkpoint)
    datasets, _ = _load_data(data or ckpt.extra.get("data"))
    ds = _split(datasets, split)
    spec = parse_regspec(reg)
    d = _out_dir(out)
    names = list(model.box.names)
    if method == "grid":
        est = point_estimate_grid(model, spec, ds.x, _axes(model, grid), _reference(model, init))
        write_grid_files(d, "landscape", est.grid.values, est.grid.axes, est.grid.fixed, "R", reg)
        result = {"method": method, "theta": est.theta.as_dict(), "value": est.value, "index": est.index}
    elif method == "gradient":
        est = point_estimate_gradient(model, spec, ds.x, _reference(model, init), steps, lr, lr_end)
        result = {"method": method, "theta": est.as_dict(), "steps": steps,
                  "value": eval_reg(spec, model, est.values, ds.x).scalar}
    elif method == "posterior":
        land = eval_landscape(model, spec, _axes(model, grid), ds.x, reference=_reference(model, init))
        post = posterior_grid(land, model.box, beta)
        write_grid_files(d, "posterior", post.probs, post.axes, post.fixed, "P", reg)
        result = {"method": method, "beta": beta, "entropy": post.entropy(),
                  "mode_theta": land.cell_theta(int(np.argmax(post.probs))).tolist()}
    elif method == "encoder":
        train_x = datasets["train"].x
        enc = train_encoder(model, spec, train_x, encoder or EncoderConfig())
        save_encoder(d / "encoder.gbck", enc)
        theta = enc(ds.x)
        header = names + ([f"true_{n}" for n in names] if ds.theta is not None else [])
        rows = theta if ds.theta is None else np.concatenate([theta, ds.theta], axis=1)
        lines = [",".join(header)] + [",".join(repr(float(v)) for v in r) for r in rows]
        (d / "encoder_theta.csv").write_text("\n".join(lines) + "\n")
        result = {"method": method, "count": len(theta), "median_theta": dict(zip(names, np.median(theta, 0).tolist()))}
        if ds.theta is not None:
            err = np.median(np.abs(theta - ds.theta), axis=0) / model.box.width
            result["median_abs_error_over_width"] = dict(zip(names, err.tolist()))
    else:
        raise ConfigurationError(f"unknown estimation method {method!r}")
    _write_json(d / "estimate.json", result)
    return result


# ---------------------------------------------------------------- compare

COMPARE_KEYS = {"schema_version", "data", "model", "train", "schemes", "lambdas", "seeds", "reg",
                "estimate", "baseline_wiring", "pool_split", "description"}


def _mean_se(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


def run_compare(cfg: dict, datasets: dict, meta: dict) -> list:
    """Train every (scheme, lambda, seed) combination and summarize test L and R.

    The adaptive scheme selects theta afterwards by gradient descent on R
    over the test inputs; the others use the theta they learned jointly.
    """
    unknown = set(cfg) - COMPARE_KEYS
    if unknown:
        raise ConfigurationError(f"compare configuration: unknown keys {sorted(unknown)}")
    seeds = cfg.get("seeds", [0])
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ConfigurationError("compare needs at least one seed")
    reg = cfg.get("reg") or cfg["train"].get("reg")
    if not reg:
        raise ConfigurationError("compare needs a regularizer expression")
    spec = parse_regspec(reg)
    est = {"steps": 2000, "lr": 0.01, "lr_end": 1e-4, **cfg.get("estimate", {})}
    baseline = cfg.get("baseline_wiring", {"include_theta": False, "include_ftheory": False})
    test = datasets["test"]
    rows = []
    for scheme in cfg.get("schemes", ["adaptive", "inductive", "transductive"]):
        scheme = Scheme(scheme)
        for lam in cfg.get("lambdas", [0.001, 0.01, 0.1]):
            test_l, test_r = [], []
            for seed in seeds:
                model_cfg = dict(cfg["model"])
                if scheme is not Scheme.ADAPTIVE:
                    model_cfg["wiring"] = {**model_cfg.get("wiring", {}), **baseline}
                run = {"schema_version": SCHEMA_VERSION, "model": model_cfg,
                       "train": {**cfg["train"], "scheme": scheme.value, "reg": reg},
                       "pool_split": cfg.get("pool_split", "test")}
                model, config, result = run_training(run, datasets, meta, seed, lam)
                if scheme is Scheme.ADAPTIVE:
                    init = (model.box.lower + model.box.upper) / 2
                    theta = point_estimate_gradient(model, spec, test.x, init, est["steps"], est["lr"],
                                                    est["lr_end"]).values
                else:
                    theta = result.theta
                test_l.append(evaluate_loss(model, theta, test))
                test_r.append(eval_reg(spec, model, theta, test.x).scalar)
            lm, ls = _mean_se(test_l)
            rm, rs = _mean_se(test_r)
            rows.append({"scheme": scheme.value, "lambda": lam, "n": len(seeds), "test_L_mean": lm,
                         "test_L_se": ls, "test_R_mean": rm, "test_R_se": rs,
                         "test_L": test_l, "test_R": test_r})
    return rows


SUMMARY_COLUMNS = ("scheme", "lambda", "n", "test_L_mean", "test_L_se", "test_R_mean", "test_R_se")


def compare_csv(rows: list) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if isinstance(r[c], str) else repr(r[c]) for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def compare_markdown(rows: list) -> str:
    lines = ["| scheme | lambda | n | test L (mean ± se) | test R (mean ± se) |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['scheme']} | {r['lambda']:g} | {r['n']} | {r['test_L_mean']:.4g} ± "
                     f"{r['test_L_se']:.2g} | {r['test_R_mean']:.4g} ± {r['test_R_se']:.2g} |")
    return "\n".join(lines)


def cmd_compare(cfg: dict, out, data=None, seeds=None) -> list:
    if seeds is not None:
        cfg = dict(cfg, seeds=seeds)
    datasets, meta = _load_data(data or cfg.get("data"))
    rows = run_compare(cfg, datasets, meta)
    d = _out_dir(out)
    (d / "summary.csv").write_text(compare_csv(rows))
    _write_json(d / "runs.json", rows)
    return rows


__all__ = ["cmd_generate", "cmd_train", "cmd_train_sweep", "cmd_landscape", "cmd_estimate", "cmd_compare",
           "run_training", "run_compare", "training_metrics", "compare_csv", "compare_markdown",
           "save_encoder", "load_encoder", "LAMBDA_SWEEP"]
