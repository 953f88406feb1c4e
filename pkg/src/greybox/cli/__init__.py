"""``greybox`` command line: generate, train, landscape, estimate, compare.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
contract error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..datagen import GenSpec
from ..errors import ConfigurationError, DivergenceError, GreyBoxError
from ..postestim import EncoderConfig
from . import commands
from .config import check_schema, load_recipe, read_json, recipe_names

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4


def _run_config(args) -> dict:
    if args.config and args.recipe:
        raise ConfigurationError("give either --config or --recipe, not both")
    if args.recipe:
        return load_recipe(args.recipe)
    if args.config:
        return read_json(args.config)
    return None


def _gen_spec(args) -> GenSpec:
    if args.config:
        cfg = dict(read_json(args.config))
        cfg.pop("schema_version")
    elif args.benchmark:
        cfg = {"benchmark": args.benchmark}
    else:
        raise ConfigurationError("generate needs --config or --benchmark")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return GenSpec.from_json(cfg)


def do_generate(args) -> None:
    spec = _gen_spec(args)
    shapes = commands.cmd_generate(spec, args.out)
    print(f"{spec.benchmark.value} dataset written to {args.out} (seed {spec.seed})")
    for name, (xs, ys) in shapes.items():
        print(f"  {name}: {xs[0]} pairs, x {tuple(xs[1:])}, y {tuple(ys[1:])}")


def do_train(args) -> None:
    run = _run_config(args)
    if run is None and not args.checkpoint:
        raise ConfigurationError("train needs --config, --recipe or --checkpoint to resume")
    if args.lambda_sweep:
        if args.checkpoint:
            raise ConfigurationError("--lambda-sweep cannot resume a checkpoint")
        results = commands.cmd_train_sweep(run, args.out, args.data, args.seed)
        for lam, m in results.items():
            print(f"lambda={lam:g}: train L {m['final_train_L']:.6g}, train R {m['final_train_R']:.6g}")
        return
    m = commands.cmd_train(run, args.out, args.data, args.seed, args.lam, args.checkpoint, args.stop_epoch)
    print(f"{m['scheme']} training: {m['epochs_completed']} epochs completed, "
          f"train L {m['final_train_L']:.6g}" + (f", test L {m['test_L']:.6g}" if "test_L" in m else ""))
    print(f"checkpoint: {args.out}/final.gbck")


def do_landscape(args) -> None:
    if args.quantity == "R" and not args.reg:
        raise ConfigurationError("landscape of R needs --reg")
    s = commands.cmd_landscape(args.checkpoint, args.reg, args.out, args.data, args.split, args.grid,
                               args.quantity, args.reference, args.threshold)
    theta = ", ".join(f"{v:.6g}" for v in s["argmin_theta"])
    print(f"argmin {args.quantity} = {s['min']:.6g} at theta = [{theta}] (cell {s['argmin_index']})")
    if "all_below_threshold" in s:
        verdict = "PASS" if s["all_below_threshold"] else "FAIL"
        print(f"{verdict}: max {args.quantity} {s['max']:.6g} vs threshold {args.threshold:g}")


def do_estimate(args) -> None:
    enc = EncoderConfig(hidden=tuple(args.hidden), epochs=args.epochs, batch_size=args.batch_size,
                        lr_start=args.lr, lr_end=args.lr_end or args.lr, seed=args.seed or 0)
    r = commands.cmd_estimate(args.checkpoint, args.reg, args.method, args.out, args.data, args.split,
                              args.grid, args.beta, args.steps, args.lr, args.lr_end, args.init, enc)
    print(json.dumps(r, indent=2, sort_keys=True))


def do_compare(args) -> None:
    cfg = check_schema(read_json(args.config), args.config)
    seeds = None if args.seeds is None else list(range(args.seeds))
    rows = commands.cmd_compare(cfg, args.out, args.data, seeds)
    print(commands.compare_markdown(rows))


def do_recipes(args) -> None:
    for name in recipe_names():
        print(name)
        if args.show:
            print(json.dumps(load_recipe(name), indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greybox", description="Adaptive grey-box modeling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic benchmark dataset")
    g.add_argument("--config", help="generator spec JSON")
    g.add_argument("--benchmark", help="benchmark name when no config is given")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=do_generate)

    t = sub.add_parser("train", help="train a grey-box model")
    t.add_argument("--config", help="run configuration JSON")
    t.add_argument("--recipe", help="bundled recipe name (see 'greybox recipes')")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--stop-epoch", type=int, help="stop after this epoch, keeping the full schedule")
    t.add_argument("--lambda", dest="lam", type=float, help="override the regularization weight")
    t.add_argument("--lambda-sweep", action="store_true",
                   help="train once per lambda in " + ", ".join(f"{v:g}" for v in commands.LAMBDA_SWEEP))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=do_train)

    def post_args(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", help="dataset directory (defaults to the one used for training)")
        q.add_argument("--split", default="test")
        q.add_argument("--reg", help="regularizer expression, e.g. 'normd * corr'")
        q.add_argument("--grid", help="i:lo:hi:n[,j:lo:hi:n]; defaults to 51 points over the box")
        q.add_argument("--out", required=True)

    la = sub.add_parser("landscape", help="evaluate R, L or NRMSE over a theta grid")
    post_args(la)
    la.add_argument("--quantity", choices=["R", "L", "NRMSE"], default="R")
    la.add_argument("--reference", help="comma-separated values for the coordinates not on the grid")
    la.add_argument("--threshold", type=float, help="report whether every cell is below this value")
    la.set_defaults(func=do_landscape)

    e = sub.add_parser("estimate", help="select theta from an adaptive model")
    post_args(e)
    e.add_argument("--method", choices=["grid", "gradient", "encoder", "posterior"], default="grid")
    e.add_argument("--beta", type=float, default=1.0)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--lr", type=float, default=1e-3)
    e.add_argument("--lr-end", type=float)
    e.add_argument("--init", help="comma-separated initial theta (gradient) or reference (grid)")
    e.add_argument("--epochs", type=int, default=50, help="encoder epochs")
    e.add_argument("--batch-size", type=int, default=100, help="encoder mini-batch size")
    e.add_argument("--hidden", type=int, nargs="+", default=[128, 128, 128], help="encoder hidden sizes")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=do_estimate)

    c = sub.add_parser("compare", help="compare schemes across lambdas and seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--data")
    c.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    c.add_argument("--out", required=True)
    c.set_defaults(func=do_compare)

    r = sub.add_parser("recipes", help="list bundled run recipes")
    r.add_argument("--show", action="store_true")
    r.set_defaults(func=do_recipes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "reg", None):
        args.reg = args.reg.strip()
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"greybox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"greybox: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GreyBoxError, OSError) as exc:
        print(f"greybox: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_RUNTIME", "EXIT_DIVERGED"]
