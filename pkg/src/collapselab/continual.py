"""Synthetic task streams, replay buffers and the multi-session protocol."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import active_subspace, numerical_rank
from .learner import (
    Hyper,
    Model,
    ModelConfig,
    SessionData,
    accuracy,
    add_head,
    features,
    init_model,
    train_session,
)
from .separability import LDA_VARIANTS, SingularCovarianceError, evaluate, lda, train_probe
from .stats import LabeledFeatures, class_stats, nc1, nc2, nc3, nc5_projection

MAX_REJECTIONS = 10_000
NC5_CENTERING = ("task", "train")
DEFAULT_RHOS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.10, 1.0)


# --- streams ------------------------------------------------------------------


@dataclass
class TaskData:
    task: int
    classes: np.ndarray  # (K,) class ids in head order
    x_train: np.ndarray
    y_train: np.ndarray  # class ids
    x_test: np.ndarray
    y_test: np.ndarray

    def local(self, y: np.ndarray) -> np.ndarray:
        """Position of each class id inside this task's head."""
        lookup = {int(c): k for k, c in enumerate(self.classes)}
        return np.array([lookup[int(c)] for c in y], dtype=int)

    def session_data(self, split: str = "train", index=None) -> SessionData:
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        if index is not None:
            x, y = x[index], y[index]
        return SessionData(x, self.local(y), np.full(len(y), self.task))


@dataclass
class TaskStream:
    scenario: str
    tasks: list
    K_per_task: int
    d_input: int
    separation: float
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


def _draw_means(rng, count: int, d: int, separation: float) -> np.ndarray:
    """Gaussian means with pairwise distance >= separation * sqrt(d), by rejection."""
    min_dist = separation * math.sqrt(d)
    means = []
    attempts = 0
    while len(means) < count:
        attempts += 1
        if attempts > MAX_REJECTIONS:
            raise ValueError(f"cannot place {count} means at distance {min_dist:.3g} in d={d}; lower the separation")
        cand = rng.normal(scale=separation, size=d)
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
    return np.array(means)


def make_stream(
    scenario: str,
    n_tasks: int,
    K_per_task: int,
    d_input: int,
    separation: float,
    samples_per_class: int,
    seed: int,
    test_per_class: int | None = None,
) -> TaskStream:
    """Gaussian-cluster task stream with identity within-class covariance.

    CIL/TIL: ``n_tasks * K`` classes, randomly ordered per seed and split into
    disjoint tasks. DIL: one layout of ``K`` classes; task ``t`` translates it
    by a random shift of length ``separation * sqrt(d)``.
    """
    if scenario not in ("CIL", "DIL", "TIL"):
        raise ValueError(f"unknown scenario {scenario!r}")
    if min(n_tasks, K_per_task, d_input, samples_per_class) < 1 or separation <= 0:
        raise ValueError("stream parameters must be positive")
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng([seed, 10])
    n_layout = K_per_task if scenario == "DIL" else n_tasks * K_per_task
    means = _draw_means(rng, n_layout, d_input, separation)
    order = rng.permutation(n_layout)
    tasks = []
    for t in range(n_tasks):
        if scenario == "DIL":
            classes = np.arange(K_per_task)
            shift = rng.normal(size=d_input)
            shift *= separation * math.sqrt(d_input) / np.linalg.norm(shift)
            task_means = means + shift
        else:
            classes = np.sort(order[t * K_per_task : (t + 1) * K_per_task])
            task_means = means[classes]
        parts = {}
        for split, m in (("train", samples_per_class), ("test", test_per_class)):
            y = np.repeat(classes, m)
            x = np.repeat(task_means, m, axis=0) + rng.normal(size=(len(y), d_input))
            parts[split] = (x, y)
        tasks.append(TaskData(t, classes, *parts["train"], *parts["test"]))
    return TaskStream(scenario, tasks, K_per_task, d_input, float(separation), seed)


# --- replay buffer ------------------------------------------------------------


def stratified_prefix(labels: np.ndarray, rho: float, seed) -> tuple[np.ndarray, list]:
    """Class-stratified sample without replacement of ``round(rho * n_c)`` per class.

    Each class is shuffled once per seed and its prefix is kept, so samples for
    a smaller ``rho`` are a subset of those for a larger one. Returns sorted
    indices and the deviations taken (classes bumped to one sample).
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    picked, notes = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        m = int(round(rho * len(idx)))
        if rho > 0 and m < 1:
            m = 1
            notes.append(f"class {int(c)}: rho*n_c={rho * len(idx):.3g} < 1, stored 1 sample")
        picked.append(idx[rng.permutation(len(idx))[:m]])
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=int), notes


@dataclass
class ReplayBuffer:
    rho: float
    seed: int = 0
    stores: dict = field(default_factory=dict)  # task -> sorted train indices
    deviations: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def session_groups(self, stream: TaskStream) -> list:
        return [stream.tasks[t].session_data("train", idx) for t, idx in sorted(self.stores.items()) if len(idx)]

    def count(self, task: int) -> int:
        return len(self.stores.get(task, ()))


def populate_buffer(buffer: ReplayBuffer, task_data: TaskData, rho: float | None = None) -> ReplayBuffer:
    """Store a stratified sample of a finished task (call only after training on it)."""
    rho = buffer.rho if rho is None else rho
    idx, notes = stratified_prefix(task_data.y_train, rho, [buffer.seed, 3, task_data.task])
    buffer.stores[task_data.task] = idx
    buffer.deviations.extend(f"task {task_data.task}, {n}" for n in notes)
    return buffer


# --- protocol -----------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    C: float = 100.0
    max_iter: int = 300
    tol: float = 1e-6


class ForgettingMatrix:
    """Lower-triangular session x task accuracies for heads (``A``) and probes (``A_star``)."""

    def __init__(self, n: int):
        self.n = n
        self.A = np.full((n, n), np.nan)
        self.A_star = np.full((n, n), np.nan)

    def _check(self, i, j):
        if not (0 <= j <= i < self.n):
            raise IndexError(f"entry ({i}, {j}) is outside the lower triangle of a {self.n}-session matrix")

    def set(self, i, j, head_acc, probe_acc):
        self._check(i, j)
        for v in (head_acc, probe_acc):
            if not 0.0 <= v <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")
        self.A[i, j], self.A_star[i, j] = head_acc, probe_acc

    def head(self, i, j) -> float:
        self._check(i, j)
        return float(self.A[i, j])

    def probe(self, i, j) -> float:
        self._check(i, j)
        return float(self.A_star[i, j])


@dataclass
class RunResult:
    scenario: str
    rho: float
    seed: int
    stream: TaskStream
    matrix: ForgettingMatrix
    nc5: np.ndarray  # (sessions, tasks): mean projected centered-mean norm per task
    nc_traj: list  # per session: metrics of the current task at session end
    dumps: list  # per session: LabeledFeatures of every task, train and test splits
    buffer: ReplayBuffer
    logs: list
    model: Model
    head_ranks: list = field(default_factory=list)


def _label_features(model: Model, stream: TaskStream) -> LabeledFeatures:
    parts = []
    for td in stream.tasks:
        for split, x, y in (("train", td.x_train, td.y_train), ("test", td.x_test, td.y_test)):
            parts.append(LabeledFeatures(features(model, x), y, np.full(len(y), td.task), np.full(len(y), split, dtype=object)))
    return LabeledFeatures.concat(parts)


def _select(dump: LabeledFeatures, tasks, split: str, index_by_task=None) -> LabeledFeatures:
    mask = np.isin(dump.task_ids, list(tasks)) & (dump.split == split)
    sel = dump.subset(mask)
    if index_by_task is None:
        return sel
    keep = []
    for t in tasks:
        rows = np.flatnonzero(sel.task_ids == t)
        keep.append(rows[index_by_task.get(t, np.zeros(0, dtype=int))])
    return sel.subset(np.concatenate(keep))


def _nc5_scores(dump: LabeledFeatures, buffer: ReplayBuffer, n_tasks: int, current: int, centering: str = "task") -> np.ndarray:
    """Per-task mean norm of centered class means projected on the active subspace.

    The active subspace is spanned by the centered class means of the session's
    training data (current task plus buffer). ``centering="task"`` centers each
    evaluated task's class means by that task's own mean; ``"train"`` uses the
    global mean of the session's training data instead.
    """
    if centering not in NC5_CENTERING:
        raise ValueError(f"unknown centering {centering!r}")
    idx = {current: None}
    idx.update({t: i for t, i in buffer.stores.items() if len(i)})
    parts = [_select(dump, [t], "train") if i is None else _select(dump, [t], "train", {t: i}) for t, i in idx.items()]
    st = class_stats(LabeledFeatures.concat(parts))
    sub = active_subspace(st.centered)
    pop = _select(dump, range(n_tasks), "train")
    out = np.zeros(n_tasks)
    for t in range(n_tasks):
        st_t = class_stats(pop.subset(pop.task_ids == t))
        center = st_t.global_mean if centering == "task" else st.global_mean
        out[t] = float(np.mean([nc5_projection(mu - center, sub) for mu in st_t.means]))
    return out


def _session_nc(model: Model, td: TaskData, scenario: str) -> dict:
    data = LabeledFeatures(features(model, td.x_train), td.y_train)
    st = class_stats(data, keys=td.classes)
    head = 0 if scenario == "DIL" else td.task
    W, _ = model.heads[head]
    return {"nc1_ratio": nc1(data, st)[1], "nc2_cos_std": nc2(st).cos_std, "nc3": nc3(W, st)}


def run_protocol(stream: TaskStream, model_cfg: ModelConfig, hyper: Hyper, rho: float, probe_cfg: ProbeConfig = ProbeConfig(), progress=None, nc5_centering: str = "task") -> RunResult:
    """Train session by session with replay and fill the forgetting matrix.

    Probes are trained on frozen train-split features and evaluated on the
    test split. Single-head scenarios use one probe over every class seen so
    far; TIL uses one probe per task.
    """
    scenario = stream.scenario
    n = stream.n_tasks
    expected_mode = "single" if scenario == "DIL" else "multi"
    if model_cfg.head_mode != expected_mode:
        raise ValueError(f"{scenario} needs head_mode={expected_mode!r}")
    if model_cfg.K_per_task != stream.K_per_task or model_cfg.input_dim != stream.d_input:
        raise ValueError("model config does not match the stream")
    model = init_model(model_cfg)
    buffer = ReplayBuffer(rho, seed=stream.seed)
    matrix = ForgettingMatrix(n)
    nc5 = np.zeros((n, n))
    traj, dumps, logs, ranks = [], [], [], []
    for i, td in enumerate(stream.tasks):
        if i > 0 and scenario != "DIL":
            add_head(model)
        _, log = train_session(model, td.session_data("train"), buffer.session_groups(stream), hyper, scenario)
        logs.append(log)
        dump = _label_features(model, stream)
        dumps.append(dump)
        shared_probe = None
        if scenario != "TIL":
            shared_probe = train_probe(_select(dump, range(i + 1), "train"), probe_cfg.C, probe_cfg.max_iter, probe_cfg.tol)
        for j in range(i + 1):
            test = stream.tasks[j].session_data("test")
            head_acc = accuracy(model, test.x, test.y_local, test.tasks, scenario)
            probe = shared_probe or train_probe(_select(dump, [j], "train"), probe_cfg.C, probe_cfg.max_iter, probe_cfg.tol)
            matrix.set(i, j, head_acc, evaluate(probe, _select(dump, [j], "test")))
        nc5[i] = _nc5_scores(dump, buffer, n, i, nc5_centering)
        traj.append(_session_nc(model, td, scenario))
        ranks.append(numerical_rank(model.head_weights()[0]))
        populate_buffer(buffer, td)
        if progress is not None:
            progress(f"session {i + 1}/{n}: head acc {np.nanmean(matrix.A[i, : i + 1]):.3f}, probe acc {np.nanmean(matrix.A_star[i, : i + 1]):.3f}")
    return RunResult(scenario, rho, stream.seed, stream, matrix, nc5, traj, dumps, buffer, logs, model, ranks)


def forgetting(matrix: ForgettingMatrix) -> dict:
    """Shallow (head) and deep (probe) forgetting after the final session.

    ``F_j = A_jj - A_nj`` averaged over past tasks ``j < n``; a single-task
    run yields an empty summary.
    """
    n = matrix.n
    if n < 2:
        return {}
    last = n - 1
    shallow = [matrix.head(j, j) - matrix.head(last, j) for j in range(last)]
    deep = [matrix.probe(j, j) - matrix.probe(last, j) for j in range(last)]
    return {
        "mean_shallow": float(np.mean(shallow)),
        "mean_deep": float(np.mean(deep)),
        "shallow": shallow,
        "deep": deep,
        "head_curves": [matrix.A[j:, j].copy() for j in range(n)],
        "probe_curves": [matrix.A_star[j:, j].copy() for j in range(n)],
    }


# --- post-hoc analyses on the final session -----------------------------------


def _past_split(run: RunResult, split: str) -> LabeledFeatures:
    n = run.stream.n_tasks
    if n < 2:
        raise ValueError("needs at least two tasks")
    return _select(run.dumps[-1], range(n - 1), split)


def _observed(pop: LabeledFeatures, rho: float, run: RunResult) -> LabeledFeatures:
    """Buffer sample at ``rho`` drawn as in the run's replay buffer (nested in rho)."""
    parts = []
    for t in np.unique(pop.task_ids):
        td = pop.subset(pop.task_ids == t)
        idx, _ = stratified_prefix(td.class_ids, rho, [run.buffer.seed, 3, int(t)])
        if len(idx):
            parts.append(td.subset(idx))
    if not parts:
        raise ValueError(f"rho={rho} stores no samples")
    return LabeledFeatures.concat(parts)


def lda_suite(run: RunResult, rho_values) -> dict:
    """Accuracy of the four LDA variants on past-task test features, per rho.

    Population statistics come from all past-task train features after the
    final session; observed statistics from the class-stratified buffer
    sample at each rho, drawn exactly as the replay buffer draws it. A
    variant whose covariance is singular is skipped (value ``None``) and the
    reason is reported under ``"skipped"``.
    """
    pop = _past_split(run, "train")
    test = _past_split(run, "test")
    keys = np.unique(pop.class_ids)
    st_pop = class_stats(pop, keys=keys)
    table = {name: [] for name in LDA_VARIANTS}
    skipped = []
    for rho in rho_values:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st_obs = class_stats(_observed(pop, rho, run), keys=keys)
        for name, (mean_src, cov_src) in LDA_VARIANTS.items():
            try:
                clf = lda(mean_src, cov_src, st_pop, st_obs)
                table[name].append(evaluate(clf, test))
            except (SingularCovarianceError, ValueError) as exc:
                table[name].append(None)
                skipped.append((float(rho), name, str(exc)))
    return {"rho": [float(r) for r in rho_values], **table, "skipped": skipped}


def statistics_gap(run: RunResult, rho: float, tol: float = 1e-6) -> dict:
    """Buffer vs population moments of past classes, averaged over classes."""
    pop = _past_split(run, "train")
    keys = np.unique(pop.class_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st_obs = class_stats(_observed(pop, rho, run), keys=keys)
    st_pop = class_stats(pop, keys=keys)
    mean_gap = np.linalg.norm(st_pop.means - st_obs.means, axis=1)
    cov_gap = np.linalg.norm(st_pop.covs - st_obs.covs, axis=(1, 2))
    rank_obs = [numerical_rank(c, tol) for c in st_obs.covs]
    rank_pop = [numerical_rank(c, tol) for c in st_pop.covs]
    return {
        "mean_gap": float(mean_gap.mean()),
        "cov_gap": float(cov_gap.mean()),
        "rank_obs": float(np.mean(rank_obs)),
        "rank_pop": float(np.mean(rank_pop)),
        "samples_per_class": float(np.mean(st_obs.counts)),
    }
