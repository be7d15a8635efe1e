"""Run a replicated experiment and print the aggregated table.

    python scripts/run_desk_experiment.py --config configs/experiment_desk.json --out runs/desk
    python scripts/run_desk_experiment.py --config configs/experiment_desk_growing_leaves.json --out runs/grow

Results go to ``<out>/results.csv`` and ``<out>/results_agg.csv``; an
interrupted run resumes from the blocks already written.
"""

import argparse
import logging
import sys
import time

from qrfvar.experiment import aggregate, load_experiment_config, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/experiment_desk.json")
    parser.add_argument("--out", required=True)
    parser.add_argument("--profile", choices=["paper", "desk"], default=None)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)

    spec = load_experiment_config(args.config, args.profile)
    t0 = time.perf_counter()
    records, _ = run_experiment(spec, args.out, threads=args.threads)
    print(f"{'method':<14} {'alpha':>6} {'n':>6} {'MRISE':>8} {'MPL':>8} {'MCR':>7}")
    for row in aggregate(records):
        print(f"{row['method']:<14} {row['alpha']:>6} {row['n_offline']:>6} {row['mrise']:>8.4f} "
              f"{row['mpl']:>8.4f} {row['mcr']:>7.4f}")
    print(f"wall time {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
