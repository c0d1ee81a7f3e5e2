"""Per-session NC5 projection scores without replay (rows: session, columns: task).

    python3 scripts/nc5_drift.py --seeds 0 1 2 --out results/nc5_drift.csv
"""

import argparse
import sys

from collapselab.experiments import ood_drift
from collapselab.fileio import write_csv


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="results/nc5_drift.csv")
    args = p.parse_args(argv)
    rows = []
    for seed in args.seeds:
        res = ood_drift(seed)
        print(
            f"seed {seed}: task 0 score {res['task1_session1']:.3f} -> {res['task1_session2']:.3f}, "
            f"unseen {res['unseen_session2']:.3f}",
            file=sys.stderr,
        )
        s = res["nc5"]
        rows += [[seed, i, *s[i]] for i in range(s.shape[0])]
    n = len(rows[0]) - 2
    write_csv(args.out, ["seed", "session"] + [f"task{j}" for j in range(n)], rows)


if __name__ == "__main__":
    main()
