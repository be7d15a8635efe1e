"""Replicated comparison of raw and conformal forests across offline sample sizes.

For each replication a fresh set of evaluation covariates is drawn together
with their reference VaR values and coverage loss samples. These are keyed
by replication only, so all offline sizes and both methods are scored
against the same points. Per-replication records are appended to
``results.csv`` block by block, and a rerun skips blocks already on disk.
"""

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import fit_conformal_forest
from .forest import Forest, ForestConfig
from .market import MarketConfig, conditional_losses, generate_offline_dataset, ground_truth_var, simulate_to_horizon
from .metrics import EvalGrid, MetricRecord, coverage_rate_sorted, mpl, rmse_per_replication
from .storage import atomic_write_text, format_float, read_json
from .streams import COVER, DATA, EVAL, FOREST, SPLIT, TRUTH, derive_seed, stream
from .errors import ConfigError

log = logging.getLogger(__name__)

RESULTS_HEADER = ["method", "alpha", "n_offline", "rep", "mrise", "mpl", "mcr",
                  "fit_seconds", "predict_micros_per_point", "seed"]
AGGREGATE_HEADER = ["method", "alpha", "n_offline", "n_reps", "mrise", "mpl", "mcr",
                    "fit_seconds", "predict_micros_per_point", "seed"]
METHODS = ("qrf", "conformal_qrf")


@dataclass
class ExperimentSpec:
    market: MarketConfig
    forest: ForestConfig
    grid: EvalGrid
    seed: int = 0
    train_fraction: float = 0.7
    correction_mode: str = "finite_sample"


def load_experiment_config(path, profile=None):
    """Parse an experiment JSON; ``market``/``forest`` may be inline objects or relative paths."""
    path = Path(path)
    raw = read_json(path, "experiment")
    if not isinstance(raw, dict):
        raise ConfigError("experiment", "config must be a JSON object")
    allowed = {"market", "forest", "grid", "seed", "profile", "train_fraction", "correction_mode"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")

    def section(name):
        value = raw.get(name, {})
        if isinstance(value, str):
            value = read_json(path.parent / value, name)
        return value

    if "market" not in raw:
        raise ConfigError("market", "missing required field")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {seed!r}")
    return ExperimentSpec(
        market=MarketConfig.from_dict(section("market")),
        forest=ForestConfig.from_dict(section("forest")),
        grid=EvalGrid.from_dict(section("grid"), profile or raw.get("profile")),
        seed=seed,
        train_fraction=float(raw.get("train_fraction", 0.7)),
        correction_mode=raw.get("correction_mode", "finite_sample"),
    )


@dataclass
class EvaluationSet:
    points: np.ndarray
    truth: np.ndarray  # (n_points, n_alphas)
    cover_sorted: np.ndarray  # (n_points, n_cov_samples), each row ascending


def evaluation_set(market, grid, seed, rep, threads=1):
    points, _ = simulate_to_horizon(market, stream(seed, EVAL, rep), size=grid.n_points)
    alphas = np.array(grid.alphas)

    def one(j):
        x = points[j]
        truth = ground_truth_var(x, alphas, market, market.n_oracle, stream(seed, TRUTH, rep, j))
        cover = np.sort(conditional_losses(x, market, grid.n_cov_samples, "closed_form",
                                           stream(seed, COVER, rep, j)))
        return truth, cover

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, range(grid.n_points)))
    else:
        parts = [one(j) for j in range(grid.n_points)]
    return EvaluationSet(points, np.array([p[0] for p in parts]), np.array([p[1] for p in parts]))


def _score(method, estimates, ev, grid, n, rep, seed, fit_seconds, predict_micros, record_timings):
    rmse = rmse_per_replication(ev.truth.T, estimates.T)
    out = []
    for j, alpha in enumerate(grid.alphas):
        out.append(MetricRecord(
            method=method,
            alpha=alpha,
            n_offline=n,
            rep=rep,
            mrise=float(rmse[j]),
            mpl=mpl(ev.truth[:, j], estimates[:, j], alpha),
            mcr=coverage_rate_sorted(estimates[:, j], ev.cover_sorted),
            fit_seconds=fit_seconds if record_timings else None,
            predict_micros_per_point=predict_micros if record_timings else None,
            seed=seed,
        ))
    return out


def run_block(spec, n, rep, ev, threads=1, record_timings=False):
    """Fit and score both methods for one (offline size, replication) cell."""
    market, grid, seed = spec.market, spec.grid, spec.seed
    alphas = list(grid.alphas)
    data = generate_offline_dataset(market, n, seed=derive_seed(seed, DATA, n, rep), threads=threads)
    timings = {}

    t0 = time.perf_counter()
    forest = Forest.fit(data.x, data.loss, spec.forest.replace(seed=derive_seed(seed, FOREST, n, rep, 0)),
                        threads=threads)
    timings["qrf_fit_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    est_qrf = forest.predict_quantile(ev.points, alphas, threads=threads)
    timings["qrf_predict_micros"] = (time.perf_counter() - t0) / grid.n_points * 1e6

    t0 = time.perf_counter()
    cforest, plan, models = fit_conformal_forest(
        data, spec.forest.replace(seed=derive_seed(seed, FOREST, n, rep, 1)), alphas,
        spec.train_fraction, derive_seed(seed, SPLIT, n, rep), spec.correction_mode, threads=threads)
    timings["conformal_fit_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    offsets = np.array([models[a].offset for a in alphas])
    est_conf = cforest.predict_quantile(ev.points, alphas, threads=threads) + offsets
    timings["conformal_predict_micros"] = (time.perf_counter() - t0) / grid.n_points * 1e6

    records = _score("qrf", est_qrf, ev, grid, n, rep, seed, timings["qrf_fit_seconds"],
                     timings["qrf_predict_micros"], record_timings)
    records += _score("conformal_qrf", est_conf, ev, grid, n, rep, seed, timings["conformal_fit_seconds"],
                      timings["conformal_predict_micros"], record_timings)
    return records, timings


def _opt(v):
    return "" if v is None else format_float(v)


def record_row(r):
    return [r.method, format_float(r.alpha), str(r.n_offline), str(r.rep), format_float(r.mrise),
            format_float(r.mpl), format_float(r.mcr), _opt(r.fit_seconds), _opt(r.predict_micros_per_point),
            str(r.seed)]


def _parse_row(row):
    def opt(v):
        return None if v == "" else float(v)

    return MetricRecord(row[0], float(row[1]), int(row[2]), int(row[3]), float(row[4]), float(row[5]),
                        float(row[6]), opt(row[7]), opt(row[8]), int(row[9]))


def _rows_to_text(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_completed(path, spec):
    """Complete (n, rep) blocks already on disk, in file order."""
    path = Path(path)
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RESULTS_HEADER:
        raise ConfigError("out", f"{path} exists but is not a results file; choose another output directory")
    blocks = {}
    for row in rows[1:]:
        try:
            rec = _parse_row(row)
        except (ValueError, IndexError):
            break  # torn final line from an interrupted run
        if rec.seed != spec.seed:
            raise ConfigError("seed", f"{path} was produced with seed {rec.seed}, not {spec.seed}")
        blocks.setdefault((rec.n_offline, rec.rep), []).append(rec)
    per_block = len(METHODS) * len(spec.grid.alphas)
    return {k: v for k, v in blocks.items() if len(v) == per_block}


def aggregate(records):
    """Average per-replication records over replications for each (method, alpha, n)."""
    groups = {}
    for r in records:
        groups.setdefault((METHODS.index(r.method), r.alpha, r.n_offline), []).append(r)
    rows = []
    for (m, alpha, n), recs in sorted(groups.items()):
        k = len(recs)

        def mean(attr):
            vals = [getattr(r, attr) for r in recs]
            if any(v is None for v in vals):
                return None
            return math.fsum(vals) / k

        rows.append(dict(method=METHODS[m], alpha=alpha, n_offline=n, n_reps=k, mrise=mean("mrise"),
                         mpl=mean("mpl"), mcr=mean("mcr"), fit_seconds=mean("fit_seconds"),
                         predict_micros_per_point=mean("predict_micros_per_point"), seed=recs[0].seed))
    return rows


def aggregate_row(a):
    return [a["method"], format_float(a["alpha"]), str(a["n_offline"]), str(a["n_reps"]),
            format_float(a["mrise"]), format_float(a["mpl"]), format_float(a["mcr"]),
            _opt(a["fit_seconds"]), _opt(a["predict_micros_per_point"]), str(a["seed"])]


def run_experiment(spec, out_dir=None, threads=1, record_timings=False):
    """Run the full grid; returns ``(records, timings)``.

    With ``out_dir`` the per-replication CSV is appended after each block and
    ``results_agg.csv`` is written at the end.
    """
    grid = spec.grid
    results_path = Path(out_dir) / "results.csv" if out_dir is not None else None
    done = {}
    if results_path is not None:
        results_path.parent.mkdir(parents=True, exist_ok=True)
        done = _load_completed(results_path, spec)
        kept = [record_row(r) for rep in range(grid.n_reps) for n in grid.offline_sizes
                for r in done.get((n, rep), [])]
        atomic_write_text(results_path, _rows_to_text(kept, RESULTS_HEADER))
        if done:
            log.info("resuming: %d of %d blocks already complete", len(done),
                     grid.n_reps * len(grid.offline_sizes))

    records = []
    timings = []
    for rep in range(grid.n_reps):
        pending = [n for n in grid.offline_sizes if (n, rep) not in done]
        ev = None
        if pending:
            t0 = time.perf_counter()
            ev = evaluation_set(spec.market, grid, spec.seed, rep, threads=threads)
            log.info("rep %d: evaluation set ready (%.1fs)", rep, time.perf_counter() - t0)
        for n in grid.offline_sizes:
            if (n, rep) in done:
                records.extend(done[(n, rep)])
                continue
            t0 = time.perf_counter()
            block, t = run_block(spec, n, rep, ev, threads=threads, record_timings=record_timings)
            records.extend(block)
            timings.append(dict(n_offline=n, rep=rep, **t))
            if results_path is not None:
                with open(results_path, "a", newline="") as fh:
                    fh.write(_rows_to_text([record_row(r) for r in block], None))
                    fh.flush()
            log.info("rep %d n=%d done (%.1fs)", rep, n, time.perf_counter() - t0)

    if out_dir is not None:
        agg = [aggregate_row(a) for a in aggregate(records)]
        atomic_write_text(Path(out_dir) / "results_agg.csv", _rows_to_text(agg, AGGREGATE_HEADER))
    return records, timings
