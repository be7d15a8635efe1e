"""Monte Carlo check of split-conformal marginal coverage on heteroscedastic toy data.

Y = X * eps with X ~ U[1, 2] and eps standard normal. Each trial draws a fresh
training set, splits it, calibrates and scores fresh test points. A constant
base model is included to show the guarantee does not depend on the model.
"""

import argparse

import numpy as np

from qrfvar.conformal import ConstantQuantileModel, calibrate, fit_conformal_forest
from qrfvar.forest import ForestConfig
from qrfvar.market import OfflineDataset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=2000)
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--test-points", type=int, default=10)
    parser.add_argument("--alpha", type=float, action="append")
    parser.add_argument("--trees", type=int, default=25)
    parser.add_argument("--mode", choices=["finite_sample", "plain"], default="finite_sample")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    alphas = args.alpha or [0.9, 0.99]

    rng = np.random.default_rng(args.seed)
    n, k = args.n, args.test_points
    hits = {(b, a): 0 for b in ("qrf", "constant") for a in alphas}
    for t in range(args.trials):
        x = rng.uniform(1, 2, (n + k, 1))
        y = x[:, 0] * rng.standard_normal(n + k)
        _, plan, models = fit_conformal_forest(OfflineDataset(x[:n], y[:n]), ForestConfig(n_trees=args.trees, seed=t),
                                               alphas, 0.7, int(rng.integers(2**63)), args.mode)
        for a in alphas:
            hits["qrf", a] += int(np.sum(y[n:] <= models[a].predict(x[n:])))
            const = calibrate(ConstantQuantileModel(0.0), x[plan.calib_indices], y[plan.calib_indices], a, args.mode)
            hits["constant", a] += int(np.sum(y[n:] <= const.predict(x[n:])))

    total = args.trials * k
    for (base, a), h in sorted(hits.items()):
        rate = h / total
        se = np.sqrt(rate * (1 - rate) / total)
        print(f"{base:<9} alpha={a:<6} coverage={rate:.4f} (se {se:.4f})")


if __name__ == "__main__":
    main()
