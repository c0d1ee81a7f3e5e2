"""LDA counterfactual accuracies and buffer statistics gaps across buffer fractions.

    python3 scripts/lda_suite.py --seeds 0 1 2 --out results/lda_suite.csv
"""

import argparse
import sys

from collapselab.continual import lda_suite, statistics_gap
from collapselab.experiments import LDA_ORDERING, LDA_RHOS, average_tables
from collapselab.fileio import write_csv
from collapselab.separability import LDA_VARIANTS


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rhos", type=float, nargs="+", default=list(LDA_RHOS))
    p.add_argument("--train-rho", type=float, default=0.05, help="buffer fraction used while training")
    p.add_argument("--out", default="results/lda_suite.csv")
    args = p.parse_args(argv)
    tables, gaps = [], []
    for seed in args.seeds:
        run = LDA_ORDERING.run(args.train_rho, seed)
        tables.append(lda_suite(run, args.rhos))
        gaps.append([statistics_gap(run, rho) for rho in args.rhos])
        print(f"seed {seed} done", file=sys.stderr)
    avg = average_tables(tables)
    stat_keys = ("mean_gap", "cov_gap", "rank_obs", "rank_pop")
    rows = []
    for k, rho in enumerate(args.rhos):
        stats = [sum(g[k][key] for g in gaps) / len(gaps) for key in stat_keys]
        rows.append([rho, *(avg[name][k] for name in LDA_VARIANTS), *stats])
    write_csv(args.out, ["rho", *LDA_VARIANTS, *stat_keys], rows)
    for name in LDA_VARIANTS:
        print(f"{name:<26}" + " ".join(f"{v:.3f}" for v in avg[name]), file=sys.stderr)


if __name__ == "__main__":
    main()
