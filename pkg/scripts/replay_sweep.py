"""Shallow vs deep forgetting across buffer fractions at desk scale.

    python3 scripts/replay_sweep.py --seeds 0 1 2 --jobs 4 --out results/replay_sweep.csv
"""

import argparse
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from collapselab.continual import DEFAULT_RHOS
from collapselab.experiments import DESK, replay_gap
from collapselab.fileio import write_csv


def _point(args):
    rho, seed, scenario = args
    return replay_gap(rho, seed, replace(DESK, scenario=scenario))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rhos", type=float, nargs="+", default=list(DEFAULT_RHOS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--scenario", choices=("CIL", "TIL", "DIL"), default="CIL")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="results/replay_sweep.csv")
    args = p.parse_args(argv)
    points = [(rho, seed, args.scenario) for rho, seed in itertools.product(args.rhos, args.seeds)]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(_point, points))
    rows = []
    for rho in args.rhos:
        sel = [r for r in results if r["rho"] == rho]
        sh = np.array([r["mean_shallow"] for r in sel])
        dp = np.array([r["mean_deep"] for r in sel])
        rows.append([rho, sh.mean(), sh.std(), dp.mean(), dp.std(), len(sel)])
        print(f"rho={rho:<5g} shallow {sh.mean():.3f} +- {sh.std():.3f}   deep {dp.mean():.3f} +- {dp.std():.3f}", file=sys.stderr)
    write_csv(args.out, ["rho", "shallow_mean", "shallow_std", "deep_mean", "deep_std", "n_seeds"], rows)


if __name__ == "__main__":
    main()
