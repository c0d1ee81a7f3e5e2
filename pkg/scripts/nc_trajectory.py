"""NC1-NC3 along training on a single task, logged every few hundred steps.

    python3 scripts/nc_trajectory.py --seed 0 --out results/nc_trajectory.csv
"""

import argparse
from dataclasses import replace

from collapselab.experiments import NC_EMERGENCE
from collapselab.fileio import write_csv
from collapselab.learner import features, init_model, train_session
from collapselab.stats import LabeledFeatures, class_stats, nc1, nc2, nc3


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=NC_EMERGENCE.steps)
    p.add_argument("--every", type=int, default=1000)
    p.add_argument("--out", default="results/nc_trajectory.csv")
    args = p.parse_args(argv)
    cfg = replace(NC_EMERGENCE, steps=args.steps, log_every=args.every)
    td = cfg.stream(args.seed).tasks[0]
    model = init_model(cfg.model_config(args.seed))

    def snapshot(step, m):
        data = LabeledFeatures(features(m, td.x_train), td.y_train)
        st = class_stats(data, keys=td.classes)
        return nc1(data, st)[1], nc2(st).cos_std, nc3(m.heads[0][0], st)

    _, log = train_session(model, td.session_data("train"), None, cfg.hyper(args.seed), cfg.scenario, callback=snapshot)
    rows = [[s, loss, acc, *snap] for (s, snap), loss, acc in zip(log.snapshots, log.loss, log.accuracy)]
    write_csv(args.out, ["step", "train_loss", "train_acc", "nc1_ratio", "nc2_cos_std", "nc3"], rows)
    print(f"terminal phase from step {log.tpt_onset}")


if __name__ == "__main__":
    main()
