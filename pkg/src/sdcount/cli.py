"""Command-line driver for the divide-and-conquer counting experiments.

Subcommands:

    gen-data       synthesize the cell-counting dataset (train + test splits)
    train          fit the toy model on a generated dataset
    eval           score a checkpoint and emit report/bin-curve CSVs
    verify-theory  run the division-bound sweep and the error-bound Monte Carlo

Exit codes: 0 ok, 2 bad config/arguments, 3 I/O failure, 4 non-finite
training loss, 5 theory bound violated.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from sdcount import groundtruth, losses, metrics, synthcells, theory, toymodel

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_BOUND = 5


class ConfigError(ValueError):
    pass


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SDC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"SDC_SEED must be an integer, got {env!r}") from e
    return 0


def _jobs(args):
    return args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)


# --- gen-data -------------------------------------------------------------------

_SPLIT_FIELDS = {
    "n_images", "image_size", "subregion", "count_lo", "count_hi",
    "blob_sigma", "blob_peak", "min_separation", "seed",
}


def default_config():
    return {
        "seed": 0,
        "train": {"n_images": 500, "image_size": 256, "subregion": 64,
                  "count_lo": 0, "count_hi": 10},
        "test": {"n_images": 500, "image_size": 256, "subregion": 64,
                 "count_lo": 0, "count_hi": 20},
    }


def _build_specs(config, seed_override):
    base = default_config()
    unknown = set(config) - {"seed", "train", "test"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = config.get("seed", base["seed"])
    if seed_override is not None:
        seed = seed_override
    rng = np.random.default_rng(seed)
    derived = rng.integers(0, 2**63 - 1, 2)
    specs = {}
    for split, derived_seed in zip(("train", "test"), derived):
        merged = dict(base[split])
        user = config.get(split, {})
        bad = set(user) - _SPLIT_FIELDS
        if bad:
            raise ConfigError(f"unknown {split} config keys: {sorted(bad)}")
        merged.update(user)
        merged.setdefault("seed", int(derived_seed))
        try:
            specs[split] = synthcells.SynthSpec(**merged)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad {split} spec: {e}") from e
    return specs["train"], specs["test"]


def cmd_gen_data(args):
    if args.print_default_config:
        print(json.dumps(default_config(), indent=1, sort_keys=True))
        return 0
    if args.out is None:
        raise ConfigError("--out is required")
    config = {}
    if args.config:
        try:
            with open(args.config) as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config JSON: {e}") from e
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
    train_spec, test_spec = _build_specs(config, args.seed)
    manifest = synthcells.gen_dataset(train_spec, test_spec, args.out, jobs=_jobs(args))
    print(manifest)
    return 0


# --- train ----------------------------------------------------------------------


def cmd_train(args):
    manifest = synthcells.load_manifest(args.data)
    seed = _resolve_seed(args)
    config = toymodel.TrainConfig(
        mode=args.mode,
        stages=args.stages,
        c_max=args.cmax,
        scheme=args.scheme,
        lr=args.lr,
        epochs=args.epochs,
        seed=seed,
        gt_sigma=args.gt_sigma,
    )
    model = toymodel.init_model(
        mode=config.mode, stages=config.stages, c_max=config.c_max,
        scheme=config.scheme, seed=seed, gt_sigma=config.gt_sigma,
    )
    model, curve = toymodel.train(model, manifest, config, jobs=_jobs(args))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    toymodel.save_checkpoint(args.out, model)
    toymodel.write_loss_curve(args.out + ".losscurve.csv", curve)
    if curve:
        print(f"final epoch mean loss: {curve[-1].breakdown.total:.6f}")
    print(args.out)
    return 0


# --- eval -----------------------------------------------------------------------


def cmd_eval(args):
    model = toymodel.load_checkpoint(args.ckpt)
    manifest = synthcells.load_manifest(args.data)
    stages = model.stages if args.stages is None else args.stages
    if stages != model.stages:
        print(
            f"warning: checkpoint was trained with {model.stages} stage(s); "
            f"running the requested {stages}",
            file=sys.stderr,
        )
    report, _ = toymodel.evaluate(
        model, manifest, split=args.split, stages=stages,
        oracle=args.oracle, jobs=_jobs(args), bin_width=args.bin_width,
    )
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.csv")
    bins_path = os.path.join(args.out, "bins.csv")
    metrics.write_eval_report(report_path, report)
    metrics.write_bin_curves(bins_path, report.bins)
    print(f"mae={report.mae:.4f} mse={report.mse:.4f} rmae={report.rmae:.4f}")
    print(report_path)
    print(bins_path)
    return 0


# --- verify-theory ----------------------------------------------------------------


def cmd_verify_theory(args):
    seed = _resolve_seed(args)
    os.makedirs(args.out, exist_ok=True)
    rows = theory.sweep_division_bounds(args.instances, seed=seed)
    bounds_path = os.path.join(args.out, "division_bounds.csv")
    with open(bounds_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "n_min", "oracle", "n_max", "ok"])
        for r in rows:
            writer.writerow([r["id"], r["n_min"], r["oracle"], r["n_max"],
                             int(r["ok"])])
    sweep_ok = all(r["ok"] for r in rows)

    # the dense-image instance quoted in the analysis: C* = 136.5, c_max = 22
    paper_case_ok = theory.min_divisions(136.5, 22.0) == 2

    profile = theory.ErrorProfile.from_function(
        lambda x: 0.01 * x, np.linspace(0.0, 20.0, 201)
    )
    noise = None
    if args.inject_faulty_profile:
        # negative control: part errors drawn at the open-set error level
        noise = theory.ErrorProfile(np.array([0.0, 20.0]), np.array([0.2, 0.2]))
    report = theory.mc_verify_prop2(
        profile, c_star=20.0, c_max=10.0, parts=(10.0, 10.0),
        trials=args.trials, seed=seed, noise_profile=noise,
    )
    summary = {
        "division_bounds": {
            "instances": len(rows),
            "all_within_bounds": sweep_ok,
            "paper_instance_min_divisions_2": paper_case_ok,
        },
        "error_bound_mc": {
            "emp_open": report.emp_open,
            "emp_closed": report.emp_closed,
            "bound": report.bound,
            "se_open": report.se_open,
            "se_closed": report.se_closed,
            "trials": report.trials,
            "closed_within_bound": report.closed_within_bound,
            "closed_below_open": report.closed_below_open,
        },
    }
    summary_path = os.path.join(args.out, "mc_summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    print(summary_path)
    if not (sweep_ok and paper_case_ok and report.passed):
        print("theory bound violated", file=sys.stderr)
        return EXIT_BOUND
    print("all bounds hold")
    return 0


# --- wiring ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdcount",
        description="spatial divide-and-conquer counting experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic cell dataset")
    p.add_argument("--config", help="JSON config; defaults used when omitted")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=0, help="0 = all cores")
    p.add_argument("--print-default-config", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--data", required=True, help="manifest.json path")
    p.add_argument("--mode", choices=(losses.REG, losses.CLS), default=losses.CLS)
    p.add_argument("--stages", type=int, default=1)
    p.add_argument("--cmax", type=float, default=10.0)
    p.add_argument("--scheme",
                   choices=(groundtruth.ONE_LINEAR, groundtruth.TWO_LINEAR),
                   default=groundtruth.TWO_LINEAR)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--gt-sigma", type=float, default=2.0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--oracle", action="store_true",
                   help="plug ground-truth heads instead of the model")
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theory", help="check the division/error bounds")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=0)
    p.add_argument("--inject-faulty-profile", action="store_true",
                   help="negative control: force a bound violation")
    p.set_defaults(func=cmd_verify_theory)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except toymodel.NonFiniteLossError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
