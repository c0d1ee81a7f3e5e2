"""Desk-scale experiment configurations shared by the acceptance suite and scripts.

Budgets and separations were chosen so each experiment finishes in seconds
on one CPU core while sitting well inside its acceptance thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .continual import ProbeConfig, forgetting, lda_suite, make_stream, run_protocol
from .learner import Hyper, ModelConfig, features, init_model, train_session
from .stats import LabeledFeatures, class_stats, nc1, nc2, nc3


@dataclass(frozen=True)
class DeskConfig:
    scenario: str = "CIL"
    n_tasks: int = 4
    K_per_task: int = 5
    d_input: int = 32
    separation: float = 1.0
    samples_per_class: int = 200
    hidden_widths: tuple = (64, 64)
    feature_dim: int = 32
    activation: str = "relu"
    feature_activation: bool = False
    center_heads: bool = False
    init_scheme: str = "standard"
    lr: float = 0.05
    wd: float = 5e-4
    batch: int = 64
    steps: int = 3000
    log_every: int = 500
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    nc5_centering: str = "task"

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(
            input_dim=self.d_input,
            hidden_widths=self.hidden_widths,
            feature_dim=self.feature_dim,
            activation=self.activation,
            head_mode="single" if self.scenario == "DIL" else "multi",
            K_per_task=self.K_per_task,
            n_tasks=self.n_tasks,
            init_scheme=self.init_scheme,
            feature_activation=self.feature_activation,
            center_heads=self.center_heads,
            seed=seed,
        )

    def hyper(self, seed: int) -> Hyper:
        return Hyper(lr=self.lr, wd=self.wd, batch=self.batch, steps=self.steps, log_every=self.log_every, seed=seed)

    def stream(self, seed: int):
        return make_stream(self.scenario, self.n_tasks, self.K_per_task, self.d_input, self.separation, self.samples_per_class, seed)

    def run(self, rho: float, seed: int, progress=None):
        return run_protocol(self.stream(seed), self.model_config(seed), self.hyper(seed), rho, self.probe, progress, self.nc5_centering)


DESK = DeskConfig()
# one task of well-separated classes, trained long past the terminal phase onset
NC_EMERGENCE = DeskConfig(
    n_tasks=1, K_per_task=4, d_input=16, separation=3.0, samples_per_class=100, feature_dim=16, lr=0.1, wd=1e-3, steps=30_000, log_every=250
)
# strong decay and wide inputs push off-task means to the never-trained floor quickly
OOD_DRIFT = DeskConfig(n_tasks=3, d_input=512, lr=0.1, wd=1e-2, steps=4000)
# zero-sum head blocks start on the softmax-invariant asymptote
RANK_TIL = replace(DESK, scenario="TIL", center_heads=True)
RANK_CIL = replace(DESK, scenario="CIL", center_heads=True)
# wider features make a 5% buffer's pooled covariance a poor estimate
LDA_ORDERING = replace(DESK, feature_dim=64)
LDA_RHOS = (0.05, 0.1, 0.2, 0.5, 1.0)


def nc_emergence(seed: int, cfg: DeskConfig = NC_EMERGENCE) -> dict:
    """Train one task and report NC metrics on its training features."""
    stream = cfg.stream(seed)
    td = stream.tasks[0]
    model = init_model(cfg.model_config(seed))
    _, log = train_session(model, td.session_data("train"), None, cfg.hyper(seed), cfg.scenario)
    data = LabeledFeatures(features(model, td.x_train), td.y_train)
    st = class_stats(data, keys=td.classes)
    return {
        "seed": seed,
        "tpt_onset": log.tpt_onset,
        "final_loss": log.loss[-1],
        "nc1_ratio": nc1(data, st)[1],
        "nc2_cos_std": nc2(st).cos_std,
        "nc3": nc3(model.heads[0][0], st),
    }


def replay_gap(rho: float, seed: int, cfg: DeskConfig = DESK) -> dict:
    run = cfg.run(rho, seed)
    f = forgetting(run.matrix)
    return {"rho": rho, "seed": seed, "mean_shallow": f["mean_shallow"], "mean_deep": f["mean_deep"]}


def ood_drift(seed: int, cfg: DeskConfig = OOD_DRIFT) -> dict:
    """NC5 scores without replay: task 1 before/after session 2, and an unseen task."""
    run = cfg.run(0.0, seed)
    s = run.nc5
    return {
        "seed": seed,
        "task1_session1": float(s[0, 0]),
        "task1_session2": float(s[1, 0]),
        "unseen_session2": float(s[1, 2]),
        "nc5": s,
    }


def rank_reduction(seed: int) -> dict:
    out = {}
    for cfg in (RANK_TIL, RANK_CIL):
        run = cfg.run(0.0, seed)
        out[cfg.scenario] = {"rank": run.head_ranks[-1], "n_heads": run.model.n_heads, "K": cfg.K_per_task}
    return out


def lda_ordering(seed: int, rho: float = 0.05, rho_values=LDA_RHOS, cfg: DeskConfig = LDA_ORDERING) -> dict:
    return lda_suite(cfg.run(rho, seed), rho_values)


def average_tables(tables: list) -> dict:
    """Seed-average of ``lda_suite`` tables (skipped entries propagate as NaN)."""
    keys = [k for k in tables[0] if k not in ("rho", "skipped")]
    out = {"rho": tables[0]["rho"]}
    for k in keys:
        vals = np.array([[np.nan if v is None else v for v in t[k]] for t in tables], dtype=float)
        out[k] = vals.mean(axis=0)
    return out
