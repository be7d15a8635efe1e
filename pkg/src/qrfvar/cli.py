"""Command line front end.

``simulate`` and ``train`` make up the offline stage, ``predict`` is the
online stage and never touches the simulator, and ``experiment`` runs the
replicated evaluation grid. Failures exit nonzero with one stderr line of
the form ``error: <kind>: <message>``.
"""

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import fit_conformal_forest
from .errors import ConfigError, DimensionMismatch, QrfVarError
from .experiment import load_experiment_config, run_experiment
from .forest import Forest, ForestConfig
from .market import generate_offline_dataset
from .storage import (
    load_dataset,
    load_forest_config,
    load_market_config,
    load_model,
    metadata_path,
    now_iso,
    save_dataset,
    save_model,
    write_manifest,
)
from .streams import FOREST, SPLIT, derive_seed


def _manifest_path(out):
    return Path(str(out) + ".manifest.json")


def cmd_simulate(args):
    started = now_iso()
    market = load_market_config(args.config)
    loss_mode = args.loss_mode or market.loss_mode
    m_inner = market.m_inner if args.m_inner is None else args.m_inner
    data = generate_offline_dataset(market, args.n, m_inner=m_inner, loss_mode=loss_mode,
                                    seed=args.seed, threads=args.threads)
    meta = {
        "config_hash": market.config_hash(),
        "seed": args.seed,
        "n": args.n,
        "m_inner": m_inner,
        "loss_mode": loss_mode,
        "market": market.to_dict(),
    }
    save_dataset(data, args.out, meta)
    write_manifest(
        _manifest_path(args.out), "simulate", vars_for_manifest(args),
        {"dataset": args.out, "metadata": metadata_path(args.out)},
        configs={"market": str(args.config)}, seeds={"seed": args.seed}, started=started,
    )
    print(f"wrote {data.n} samples (d={data.d}, loss_mode={loss_mode}) to {args.out}")
    return 0


def cmd_train(args):
    started = now_iso()
    data = load_dataset(args.data)
    config = load_forest_config(args.config) if args.config else ForestConfig()
    config = config.replace(seed=derive_seed(args.seed, FOREST))
    alphas = sorted(set(args.alpha or []))
    meta = {"dataset": str(args.data), "n_offline": data.n, "d": data.d, "seed": args.seed}
    if args.conformal:
        if not alphas:
            raise ConfigError("alpha", "--conformal needs at least one --alpha level to calibrate")
        forest, plan, models = fit_conformal_forest(
            data, config, alphas, args.train_fraction, derive_seed(args.seed, SPLIT),
            args.correction_mode, threads=args.threads)
        meta.update(train_fraction=args.train_fraction, n_train=int(plan.train_indices.size),
                    n_calib=int(plan.calib_indices.size))
    else:
        forest = Forest.fit(data.x, data.loss, config, threads=args.threads)
        models = {}
    save_model(args.out, forest, models, meta)
    write_manifest(
        _manifest_path(args.out), "train", vars_for_manifest(args), {"model": args.out},
        configs={"forest": str(args.config) if args.config else None, "dataset": str(args.data)},
        seeds={"seed": args.seed}, started=started,
    )
    leaves = forest.leaf_sizes()
    print(f"trees: {forest.n_trees}")
    print(f"leaves: {leaves.size} total, size min/mean/max {leaves.min()}/{leaves.mean():.2f}/{leaves.max()}")
    if models:
        print(f"|I1| = {meta['n_train']}, |I2| = {meta['n_calib']}")
        for a in alphas:
            print(f"offset[alpha={a}] = {models[a].offset!r}")
    print(f"wrote model to {args.out}")
    return 0


def _read_queries(args, d):
    if args.x is not None:
        try:
            X = np.array([[float(v) for v in args.x.split(",")]])
        except ValueError:
            raise ConfigError("x", f"expected comma-separated numbers, got {args.x!r}") from None
    else:
        try:
            with open(args.x_file, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
        except FileNotFoundError:
            raise ConfigError("x-file", f"file not found: {args.x_file}") from None
        if rows and rows[0] and rows[0][0].strip().lower().startswith("x"):
            header = rows.pop(0)
            if header[-1].strip() == "loss":
                rows = [r[:-1] for r in rows]
        try:
            X = np.array([[float(v) for v in r] for r in rows], dtype=float)
        except ValueError:
            raise ConfigError("x-file", "non-numeric entries") from None
        if X.size == 0:
            raise ConfigError("x-file", "no query rows")
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionMismatch(f"query has {X.shape[-1]} features, model was trained on {d}")
    return X


def cmd_predict(args):
    bundle = load_model(args.model)
    forest = bundle.forest
    X = _read_queries(args, forest.d)
    alphas = sorted(set(args.alpha)) if args.alpha else sorted(bundle.conformal)
    if not alphas:
        raise ConfigError("alpha", "model carries no calibration; pass --alpha")
    missing = [a for a in alphas if bundle.conformal and a not in bundle.conformal]
    if missing:
        print(f"note: model is not calibrated at {missing}; conformal column left empty", file=sys.stderr)

    forest.predict_quantile(X[0], alphas)  # warm the compiled kernel outside the timed loop
    out = np.empty((X.shape[0], len(alphas)))
    t0 = time.perf_counter()
    for i in range(X.shape[0]):
        out[i] = forest.predict_quantile(X[i], alphas)
    elapsed = time.perf_counter() - t0

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["index", "alpha", "qrf"] + (["conformal_qrf"] if bundle.conformal else [])
    writer.writerow(header)
    for i in range(X.shape[0]):
        for j, a in enumerate(alphas):
            row = [i, repr(a), repr(float(out[i, j]))]
            if bundle.conformal:
                cm = bundle.conformal.get(a)
                row.append("" if cm is None else repr(float(out[i, j] + cm.offset)))
            writer.writerow(row)
    sys.stdout.write(buf.getvalue())
    micros = elapsed / X.shape[0] * 1e6
    print(f"latency_micros_per_query={micros:.1f} queries={X.shape[0]}", file=sys.stderr)
    args.latency_micros = micros
    return 0


def cmd_experiment(args):
    started = now_iso()
    spec = load_experiment_config(args.config, args.profile)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records, timings = run_experiment(spec, out, threads=args.threads, record_timings=args.timings)
    write_manifest(
        out / "manifest.json", "experiment", vars_for_manifest(args),
        {"results": out / "results.csv", "aggregate": out / "results_agg.csv"},
        configs={
            "experiment": str(args.config),
            "market": spec.market.to_dict(),
            "forest": spec.forest.to_dict(),
            "grid": spec.grid.to_dict(),
            "train_fraction": spec.train_fraction,
            "correction_mode": spec.correction_mode,
        },
        seeds={"seed": spec.seed}, started=started,
        extra={"timings": timings, "wall_seconds": time.perf_counter() - t0},
    )
    print(f"wrote {len(records)} records to {out / 'results.csv'} and {out / 'results_agg.csv'}")
    return 0


def vars_for_manifest(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


def build_parser():
    parser = argparse.ArgumentParser(prog="qrfvar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qrfvar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate an offline dataset by (nested) simulation")
    p.add_argument("--config", required=True, type=Path, help="market config JSON")
    p.add_argument("--n", required=True, type=int, help="number of outer samples")
    p.add_argument("--m-inner", type=int, default=None, help="inner paths per sample (default from config)")
    p.add_argument("--loss-mode", choices=["nested", "closed_form"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a forest (optionally with conformal calibration)")
    p.add_argument("--data", required=True, type=Path, help="dataset CSV from `simulate`")
    p.add_argument("--config", type=Path, default=None, help="forest config JSON")
    p.add_argument("--alpha", type=float, action="append", help="level to calibrate (repeatable)")
    p.add_argument("--conformal", action="store_true")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--correction-mode", choices=["finite_sample", "plain"], default="finite_sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="online VaR estimate for one or more risk-factor vectors")
    p.add_argument("--model", required=True, type=Path)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--x", help="comma-separated risk-factor vector")
    group.add_argument("--x-file", type=Path, help="CSV of query vectors, one per row")
    p.add_argument("--alpha", type=float, action="append", help="level (repeatable; default: calibrated levels)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run the replicated evaluation grid")
    p.add_argument("--config", required=True, type=Path, help="experiment config JSON")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--profile", choices=["paper", "desk"], default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--timings", action="store_true",
                   help="fill the timing columns of the CSVs (makes them run-dependent)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "experiment":
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    if getattr(args, "threads", 1) < 1:
        print("error: config: threads: must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except QrfVarError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: value: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
