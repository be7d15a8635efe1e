"""Time online VaR queries against a forest trained at desk scale.

Trains B=500 trees on n=16,000 nested-simulation samples (about half a
minute on one core), then times single-point queries the way ``qrfvar
predict`` serves them.
"""

import argparse
import platform
import time

import numpy as np

from qrfvar.conformal import fit_conformal_forest
from qrfvar.forest import ForestConfig
from qrfvar.market import generate_offline_dataset, paper_market_config, simulate_to_horizon


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=16_000)
    parser.add_argument("--trees", type=int, default=500)
    parser.add_argument("--queries", type=int, default=1000)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    alphas = [0.9, 0.95, 0.99, 0.995]

    market = paper_market_config()
    t0 = time.perf_counter()
    data = generate_offline_dataset(market, args.n, seed=args.seed, threads=args.threads)
    t_sim = time.perf_counter() - t0
    t0 = time.perf_counter()
    forest, _, models = fit_conformal_forest(data, ForestConfig(n_trees=args.trees, seed=args.seed), alphas,
                                             threads=args.threads)
    t_fit = time.perf_counter() - t0
    offsets = np.array([models[a].offset for a in alphas])

    queries, _ = simulate_to_horizon(market, np.random.default_rng(args.seed + 1), size=args.queries)
    forest.predict_quantile(queries[0], alphas)
    lat = np.empty(args.queries)
    for i, q in enumerate(queries):
        t0 = time.perf_counter()
        forest.predict_quantile(q, alphas) + offsets
        lat[i] = time.perf_counter() - t0
    lat *= 1e3

    print(f"platform: {platform.platform()}, {platform.processor() or platform.machine()}, python {platform.python_version()}")
    print(f"offline: simulate {t_sim:.1f}s, fit+calibrate {t_fit:.1f}s (n={args.n}, B={args.trees})")
    print(f"online ms/query over {args.queries} queries, {len(alphas)} levels: "
          f"median {np.median(lat):.3f}, p99 {np.percentile(lat, 99):.3f}, max {lat.max():.3f}")


if __name__ == "__main__":
    main()
