"""Command-line entry point: ``collapselab {run,analyze,simulate,validate}``.

Exit codes: 0 success, 1 failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import itertools
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import acceptance
from .continual import ProbeConfig, forgetting, make_stream, run_protocol
from .dynamics import MixtureParams, Schedule, TPTParams, perp_decay, predicted_snr_ood, predicted_snr_replay, replay_ratio_sq, sample_mixture
from .fileio import (
    ConfigError,
    DumpFormatError,
    csv_text,
    load_dump,
    matrix_csv,
    parse_experiment,
    parse_simulate,
    save_dump,
    write_csv,
    atomic_write_text,
)
from .geometry import active_subspace, build_simplex_etf, numerical_rank, orthogonal_complement
from .learner import Hyper, ModelConfig
from .stats import DegenerateStatsWarning, LabeledFeatures, class_stats, mahalanobis_sq, nc1, nc2, nc5_projection, separability_from_md, snr

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _jobs(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("COLLAPSELAB_JOBS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"COLLAPSELAB_JOBS={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError("COLLAPSELAB_JOBS must be >= 1")
    return n


# --- run ----------------------------------------------------------------------


def point_name(cfg, rho: float, wd: float, seed: int) -> str:
    return f"{cfg.scenario}_rho{rho:g}_wd{wd:g}_seed{seed}"


def _snapshot(cfg, rho, wd, seed) -> str:
    lines = ["# effective settings of this sweep point", "[point]", f"rho = {rho!r}", f"wd = {wd!r}", f"seed = {seed}", "", "[resolved]"]
    for k, v in asdict(cfg).items():
        if k in ("source_text", "out", "rho", "wd", "seeds"):
            continue
        v = ", ".join(map(str, v)) if isinstance(v, tuple) else v
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def run_point(cfg, rho: float, wd: float, seed: int, out_dir: str) -> dict:
    """Run one (rho, wd, seed) point and write its result directory."""
    stream = make_stream(cfg.scenario, cfg.n_tasks, cfg.K_per_task, cfg.d_input, cfg.separation, cfg.samples_per_class, seed, cfg.test_per_class)
    mcfg = ModelConfig(
        input_dim=cfg.d_input,
        hidden_widths=cfg.hidden_widths,
        feature_dim=cfg.feature_dim,
        activation=cfg.activation,
        head_mode="single" if cfg.scenario == "DIL" else "multi",
        K_per_task=cfg.K_per_task,
        n_tasks=cfg.n_tasks,
        init_scheme=cfg.init_scheme,
        feature_activation=cfg.feature_activation,
        center_heads=cfg.center_heads,
        seed=seed,
    )
    hyper = Hyper(lr=cfg.lr, wd=wd, batch=cfg.batch, steps=cfg.steps, log_every=cfg.log_every, seed=seed)
    name = point_name(cfg, rho, wd, seed)
    tag = lambda msg: _err(f"[{name}] {msg}")  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_protocol(stream, mcfg, hyper, rho, ProbeConfig(cfg.probe_C, cfg.probe_max_iter), tag, cfg.nc5_centering)
    d = Path(out_dir) / name
    atomic_write_text(d / "config.ini", cfg.source_text.rstrip() + "\n\n" + _snapshot(cfg, rho, wd, seed))
    matrix_csv(d / "A.csv", res.matrix.A)
    matrix_csv(d / "A_star.csv", res.matrix.A_star)
    matrix_csv(d / "nc5.csv", res.nc5)
    summary = forgetting(res.matrix)
    rows = [["mean", summary.get("mean_shallow", ""), summary.get("mean_deep", "")]]
    rows += [[j, s, dp] for j, (s, dp) in enumerate(zip(summary.get("shallow", []), summary.get("deep", [])))]
    write_csv(d / "forgetting.csv", ["task", "shallow", "deep"], rows)
    traj = []
    for i, (log, nc) in enumerate(zip(res.logs, res.nc_traj)):
        for s, loss, acc in zip(log.steps, log.loss, log.accuracy):
            traj.append([i, s, loss, acc, "", "", ""])
        traj.append([i, "end", log.loss[-1], log.accuracy[-1], nc["nc1_ratio"], nc["nc2_cos_std"], nc["nc3"]])
    write_csv(d / "nc_trajectory.csv", ["session", "step", "train_loss", "train_acc", "nc1_ratio", "nc2_cos_std", "nc3"], traj)
    write_csv(
        d / "sessions.csv",
        ["session", "tpt_onset", "head_rank"],
        [[i, log.tpt_onset, r] for i, (log, r) in enumerate(zip(res.logs, res.head_ranks))],
    )
    if cfg.dump_features:
        for i, dump in enumerate(res.dumps):
            save_dump(_with_buffer(dump, res.buffer.stores, i), d / f"features_session{i}.csv")
    return {"name": name, "rho": rho, "wd": wd, "seed": seed, **{k: summary.get(k, float("nan")) for k in ("mean_shallow", "mean_deep")}}


def _with_buffer(dump: LabeledFeatures, stores: dict, session: int) -> LabeledFeatures:
    """Append copies of the rows replayed during ``session`` tagged ``buffer``."""
    parts = [dump]
    for t in range(session):
        idx = stores.get(t)
        if idx is None or not len(idx):
            continue
        rows = np.flatnonzero((dump.task_ids == t) & (dump.split == "train"))[idx]
        b = dump.subset(rows)
        parts.append(LabeledFeatures(b.features, b.class_ids, b.task_ids, np.full(len(rows), "buffer", dtype=object)))
    return LabeledFeatures.concat(parts)


def _run_point_star(args):
    return run_point(*args)


def cmd_run(args) -> int:
    text = Path(args.config).read_text()
    cfg = parse_experiment(text, args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed_override is not None:
        cfg = replace(cfg, seeds=(args.seed_override,))
    jobs = _jobs(args.jobs)
    points = [(cfg, rho, wd, seed, cfg.out) for seed, rho, wd in itertools.product(cfg.seeds, cfg.rho, cfg.wd)]
    _err(f"running {len(points)} point(s) with {jobs} worker(s) into {cfg.out}")
    if jobs == 1:
        results = [run_point(*p) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point_star, points))
    header = ["point", "mean_shallow", "mean_deep"]
    rows = [[r["name"], r["mean_shallow"], r["mean_deep"]] for r in results]
    write_csv(Path(cfg.out) / "summary.csv", header, rows)
    width = max(len(r[0]) for r in rows)
    print(f"{'point':<{width}}  mean_shallow  mean_deep")
    for name, s, dp in rows:
        print(f"{name:<{width}}  {s:12.4f}  {dp:9.4f}")
    return EXIT_OK


# --- analyze ------------------------------------------------------------------


def _split(data: LabeledFeatures, split: str | None) -> LabeledFeatures:
    if split is None:
        split = "train" if np.any(data.split == "train") else None
    if split is None:
        return data
    mask = data.split == split
    if not mask.any():
        raise DumpFormatError(f"dump has no rows with split {split!r}")
    return data.subset(mask)


def analyze_nc(data: LabeledFeatures):
    header = ["task", "K", "nc1_delta", "nc1_ratio", "nc2_norm_mean", "nc2_norm_std", "nc2_cos_mean", "nc2_cos_std", "nc2_cos_target"]
    rows = []
    for t in np.unique(data.task_ids):
        td = data.subset(data.task_ids == t)
        if len(np.unique(td.class_ids)) < 2:
            continue
        st = class_stats(td)
        delta, ratio = nc1(td, st)
        r2 = nc2(st)
        rows.append([int(t), st.K, delta, ratio, r2.norm_mean, r2.norm_std, r2.cos_mean, r2.cos_std, r2.cos_target])
    return header, rows


def analyze_snr(data: LabeledFeatures):
    header = ["task", "class_a", "class_b", "snr", "mahalanobis_sq", "separability"]
    rows = []
    for t in np.unique(data.task_ids):
        td = data.subset(data.task_ids == t)
        st = class_stats(td)
        for a, b in itertools.combinations(st.keys, 2):
            md = mahalanobis_sq(st, a, b)
            rows.append([int(t), int(a), int(b), snr(st, a, b), md, separability_from_md(md)])
    return header, rows


def analyze_nc5(data: LabeledFeatures, reference: int | None = None):
    tasks = np.unique(data.task_ids)
    ref = int(tasks[-1]) if reference is None else reference
    if ref not in tasks:
        raise DumpFormatError(f"reference task {ref} not present in the dump")
    sub = active_subspace(class_stats(data.subset(data.task_ids == ref)).centered)
    rows = []
    for t in tasks:
        st = class_stats(data.subset(data.task_ids == t))
        rows.append([int(t), float(np.mean([nc5_projection(mu - st.global_mean, sub) for mu in st.means]))])
    return ["task", f"nc5_vs_task{ref}"], rows


def analyze_gap(data: LabeledFeatures, observed: str = "buffer", population: str = "train", tol: float = 1e-6):
    header = ["task", "class", "n_obs", "mean_gap", "cov_gap", "rank_obs", "rank_pop", "degenerate"]
    obs = data.subset(data.split == observed) if np.any(data.split == observed) else None
    if obs is None:
        raise DumpFormatError(f"dump has no rows with split {observed!r}")
    pop = _split(data, population)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateStatsWarning)
        st_pop = class_stats(pop, group_by="class_task")
        st_obs = class_stats(obs, group_by="class_task")
    for key in st_obs.keys:
        if key not in st_pop.keys:
            continue
        i, j = st_obs.index(key), st_pop.index(key)
        c, t = key
        degenerate = bool(st_obs.degenerate[i])
        rows.append([
            int(t), int(c), int(st_obs.counts[i]),
            float(np.linalg.norm(st_obs.means[i] - st_pop.means[j])),
            float(np.linalg.norm(st_obs.covs[i] - st_pop.covs[j])),
            numerical_rank(st_obs.covs[i], tol) if not degenerate else 0,
            numerical_rank(st_pop.covs[j], tol),
            "yes" if degenerate else "no",
        ])
    return header, rows


def cmd_analyze(args) -> int:
    data = load_dump(args.dump)
    if args.metric == "nc":
        header, rows = analyze_nc(_split(data, args.split))
    elif args.metric == "snr":
        header, rows = analyze_snr(_split(data, args.split))
    elif args.metric == "nc5":
        header, rows = analyze_nc5(_split(data, args.split), args.reference_task)
    else:
        header, rows = analyze_gap(data, args.observed, args.split or "train")
    sys.stdout.write(csv_text(header, rows))
    return EXIT_OK


# --- simulate -----------------------------------------------------------------


def simulate_rows(cfg):
    etf = build_simplex_etf(cfg.K, cfg.d, cfg.beta0, rotation_seed=cfg.seed)
    perp = orthogonal_complement(active_subspace(etf.means))
    rng = np.random.default_rng([cfg.seed, 1])
    mu_perp = []
    for _ in range(2):
        v = perp.basis.T @ rng.normal(size=perp.rank)
        mu_perp.append(v / np.linalg.norm(v))
    header = [
        "lambda", "pi", "t", "beta_t", "delta_t", "mean_norm_perp", "predicted_mean_norm_perp",
        "snr_measured", "predicted_snr_ood", "predicted_snr_replay", "r2",
    ]
    rows = []
    for lam, pi in itertools.product(cfg.lam, cfg.pi):
        tpt = TPTParams(
            eta=cfg.eta, lam=lam, t0=0,
            beta_schedule=Schedule("linear", cfg.beta0, cfg.beta_rate),
            delta_schedule=Schedule("geometric", cfg.delta0, cfg.delta_rate),
        )
        mixes = [MixtureParams(pi, etf.means[:, c], mu_perp[c], tpt, sigma_b=cfg.sigma_b * np.eye(cfg.K), v_perp=cfg.v_perp) for c in range(2)]
        for t in range(0, cfg.t_max + 1, cfg.t_step):
            xs = [sample_mixture(cfg.n, etf, mixes[c], t, seed=cfg.seed * 2 + c).features for c in range(2)]
            mus = [x.mean(axis=0) for x in xs]
            covs = [np.cov(x.T) for x in xs]
            tr = float(np.trace(covs[0] + covs[1]))
            diff = float(np.sum((mus[0] - mus[1]) ** 2))
            s = diff / tr if tr > 0 else math.inf
            rows.append([
                lam, pi, t, tpt.beta(t), tpt.delta(t),
                float(np.linalg.norm(perp.basis @ mus[0])),
                (1 - pi) * perp_decay(tpt, t),
                s,
                predicted_snr_ood(tpt, t),
                predicted_snr_replay(pi, None, tpt=tpt, t=t),
                replay_ratio_sq(pi),
            ])
    return header, rows


def cmd_simulate(args) -> int:
    cfg = parse_simulate(Path(args.config).read_text(), args.config)
    if args.seed_override is not None:
        cfg = replace(cfg, seed=args.seed_override)
    header, rows = simulate_rows(cfg)
    text = csv_text(header, rows)
    if args.out:
        atomic_write_text(args.out, text)
        _err(f"wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- validate -----------------------------------------------------------------


def cmd_validate(args) -> int:
    numbers = None
    if args.criteria:
        try:
            numbers = [int(x) for x in args.criteria.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--criteria expects comma-separated integers, got {args.criteria!r}") from None
        bad = [n for n in numbers if n not in acceptance.BY_NUMBER]
        if bad:
            raise ConfigError(f"unknown criteria {bad}; valid are 1..{len(acceptance.CRITERIA)}")
    overrides = {}
    for text in args.set_tolerance or []:
        try:
            n, key, value = acceptance.parse_override(text)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        overrides.setdefault(n, {})[key] = value
    outcomes = acceptance.run_all(numbers, overrides, echo=lambda line: print(line, flush=True))
    failed = [o.number for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_FAIL if failed else EXIT_OK


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapselab", description="Neural-collapse continual-learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a replay/forgetting sweep from an INI config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides [experiment] out)")
    r.add_argument("--jobs", type=int, help="worker processes (default: $COLLAPSELAB_JOBS or 1)")
    r.add_argument("--seed-override", type=int, help="replace the seed list with this single seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="metrics of a feature dump as CSV on stdout")
    a.add_argument("dump")
    a.add_argument("--metric", choices=("nc", "snr", "nc5", "gap"), default="nc")
    a.add_argument("--split", help="rows to analyse (default: train if present); for gap, the population split")
    a.add_argument("--observed", default="buffer", help="observed split for gap analysis")
    a.add_argument("--reference-task", type=int, help="task whose centered means span the active subspace (nc5)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="predicted vs sampled feature dynamics as CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="write CSV here instead of stdout")
    s.add_argument("--seed-override", type=int)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="run the acceptance suite")
    v.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    v.add_argument("--set-tolerance", action="append", metavar="N.KEY=VALUE", help="override a tolerance, e.g. 7.rel_err=1e-3")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except (DumpFormatError, FileNotFoundError, ValueError) as exc:
        _err(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
