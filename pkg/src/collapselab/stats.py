"""Class statistics, Neural Collapse metrics and separability measures."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Subspace, active_subspace, pairwise_cosines

SPLITS = ("train", "buffer", "population", "test")


class DegenerateStatsWarning(UserWarning):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class LabeledFeatures:
    features: np.ndarray
    class_ids: np.ndarray
    task_ids: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        n = self.features.shape[0]
        self.class_ids = np.asarray(self.class_ids, dtype=int).reshape(-1)
        if self.task_ids is None:
            self.task_ids = np.zeros(n, dtype=int)
        self.task_ids = np.asarray(self.task_ids, dtype=int).reshape(-1)
        if self.split is None:
            self.split = np.full(n, "train", dtype=object)
        self.split = np.asarray(self.split, dtype=object).reshape(-1)
        if n < 1:
            raise ValueError("LabeledFeatures needs at least one row")
        if not (len(self.class_ids) == len(self.task_ids) == len(self.split) == n):
            raise ValueError("label arrays must match the number of feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if np.any(self.class_ids < 0):
            raise ValueError("class ids must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "LabeledFeatures":
        mask = np.asarray(mask)
        return LabeledFeatures(self.features[mask], self.class_ids[mask], self.task_ids[mask], self.split[mask])

    @staticmethod
    def concat(parts) -> "LabeledFeatures":
        parts = list(parts)
        return LabeledFeatures(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.class_ids for p in parts]),
            np.concatenate([p.task_ids for p in parts]),
            np.concatenate([p.split for p in parts]),
        )


@dataclass
class ClassStats:
    """Per-group moments. Row ``k`` of ``means`` belongs to ``keys[k]``.

    ``global_mean`` is the unweighted average of the class means, which
    coincides with the sample mean for balanced classes.
    """

    keys: list
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    counts: np.ndarray  # (K,)
    global_mean: np.ndarray  # (d,)
    degenerate: np.ndarray = field(default=None)  # (K,) bool, n_c == 1

    @property
    def K(self) -> int:
        return len(self.keys)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def centered(self) -> np.ndarray:
        """Centered mean matrix ``U`` with one column per group (``d x K``)."""
        return (self.means - self.global_mean).T

    def index(self, key) -> int:
        try:
            return self.keys.index(key)
        except ValueError:
            raise KeyError(f"no class {key!r} in stats") from None

    def select(self, keys) -> "ClassStats":
        idx = [self.index(k) for k in keys]
        means = self.means[idx]
        return ClassStats(list(keys), means, self.covs[idx], self.counts[idx], means.mean(axis=0), self.degenerate[idx])

    def pooled_covariance(self) -> np.ndarray:
        """Count-weighted covariance with unbiased ``1/(N - K)`` normalisation."""
        dof = self.counts - 1
        total = dof.sum()
        if total <= 0:
            raise ValueError("pooled covariance needs at least one class with two samples")
        return np.einsum("k,kij->ij", dof, self.covs) / total


def _group_keys(data: LabeledFeatures, group_by: str):
    if group_by == "class":
        return data.class_ids.tolist()
    if group_by in ("class_task", "class×task", "class-task"):
        return list(zip(data.class_ids.tolist(), data.task_ids.tolist()))
    raise ValueError(f"unknown grouping {group_by!r}")


def class_stats(data: LabeledFeatures, group_by: str = "class", keys=None) -> ClassStats:
    """Means and ``1/(n_c - 1)`` covariances per group.

    When ``keys`` is given the groups are returned in that order and every key
    must be present. Single-sample groups get a zero covariance and are flagged
    as degenerate.
    """
    labels = _group_keys(data, group_by)
    present = sorted(set(labels))
    if keys is None:
        keys = present
    keys = list(keys)
    index = {}
    for i, lab in enumerate(labels):
        index.setdefault(lab, []).append(i)
    K, d = len(keys), data.d
    means = np.zeros((K, d))
    covs = np.zeros((K, d, d))
    counts = np.zeros(K, dtype=int)
    degenerate = np.zeros(K, dtype=bool)
    for k, key in enumerate(keys):
        rows = index.get(key)
        if not rows:
            raise ValueError(f"group {key!r} has no samples")
        x = data.features[rows]
        counts[k] = len(rows)
        means[k] = x.mean(axis=0)
        if len(rows) == 1:
            degenerate[k] = True
        else:
            xc = x - means[k]
            covs[k] = xc.T @ xc / (len(rows) - 1)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} group(s) with a single sample; covariance set to zero",
            DegenerateStatsWarning,
            stacklevel=2,
        )
    return ClassStats(keys, means, covs, counts, means.mean(axis=0), degenerate)


def _labels_for(data: LabeledFeatures, stats: ClassStats) -> np.ndarray:
    """Row index into ``stats`` for every sample of ``data`` (-1 if absent)."""
    grouped = isinstance(stats.keys[0], tuple)
    labels = _group_keys(data, "class_task" if grouped else "class")
    lookup = {k: i for i, k in enumerate(stats.keys)}
    return np.array([lookup.get(lab, -1) for lab in labels])


def nc1(data: LabeledFeatures, stats: ClassStats) -> tuple[float, float]:
    """Variability collapse as ``(delta, ratio)``.

    ``delta`` averages ``E||phi(x) - mu_c||^2`` over classes. ``ratio`` is the
    mean within-class covariance trace over the trace of the (biased)
    covariance of the class means.
    """
    if stats.K < 2:
        raise ValueError("NC1 ratio is undefined for a single class")
    idx = _labels_for(data, stats)
    per_class = []
    for k in range(stats.K):
        x = data.features[idx == k]
        if len(x) == 0:
            continue
        per_class.append(np.mean(np.sum((x - stats.means[k]) ** 2, axis=1)))
    delta = float(np.mean(per_class))
    within = float(np.mean(np.trace(stats.covs, axis1=1, axis2=2)))
    between = float(np.trace(np.atleast_2d(np.cov(stats.means.T, bias=True))))
    if between == 0:
        return delta, (0.0 if within == 0 else math.inf)
    return delta, within / between


@dataclass(frozen=True)
class NC2Result:
    norm_mean: float
    norm_std: float
    cos_mean: float
    cos_std: float
    cos_target: float
    sq_norm_mean: float
    n_excluded: int = 0


def nc2(stats: ClassStats) -> NC2Result:
    if stats.K < 2:
        raise ValueError("NC2 needs at least two classes")
    U = stats.centered
    norms = np.linalg.norm(U, axis=0)
    scale = max(norms.max(), np.finfo(float).tiny)
    ok = norms > 1e-12 * scale
    n_bad = int((~ok).sum())
    if n_bad:
        warnings.warn(f"{n_bad} zero centered mean(s) excluded from NC2 cosines", DegenerateStatsWarning, stacklevel=2)
    cos = pairwise_cosines(U[:, ok]) if ok.sum() >= 2 else np.array([np.nan])
    return NC2Result(
        norm_mean=float(norms.mean()),
        norm_std=float(norms.std()),
        cos_mean=float(np.mean(cos)),
        cos_std=float(np.std(cos)),
        cos_target=-1.0 / (stats.K - 1),
        sq_norm_mean=float(np.mean(norms**2)),
        n_excluded=n_bad,
    )


def nc3(head_weights: np.ndarray, stats: ClassStats) -> float:
    """Distance between the normalised head ``W`` (``K x d``) and normalised ``U^T``."""
    W = np.asarray(head_weights, dtype=float)
    Ut = stats.centered.T
    if W.shape != Ut.shape:
        raise ValueError(f"head has shape {W.shape}, expected {Ut.shape}")
    nw, nu = np.linalg.norm(W), np.linalg.norm(Ut)
    if nw == 0 or nu == 0:
        raise ValueError("NC3 is undefined for a zero head or zero class means")
    return float(np.linalg.norm(W / nw - Ut / nu))


def nearest_mean(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    d2 = np.sum((features[:, None, :] - means[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def nc4(data: LabeledFeatures, stats: ClassStats, head_weights, head_bias=None) -> float:
    """Fraction of samples where the head and the nearest class mean agree.

    Head row ``k`` is matched with ``stats.keys[k]``; ties go to the lowest index.
    """
    W = np.asarray(head_weights, dtype=float)
    b = np.zeros(W.shape[0]) if head_bias is None else np.asarray(head_bias, dtype=float)
    if W.shape != (stats.K, stats.d):
        raise ValueError(f"head has shape {W.shape}, expected {(stats.K, stats.d)}")
    head = np.argmax(data.features @ W.T + b, axis=1)
    ncc = nearest_mean(data.features, stats.means)
    return float(np.mean(head == ncc))


def nc5_projection(class_mean_centered: np.ndarray, sub: Subspace) -> float:
    """Norm of the projection onto the active subspace; ~0 marks an OOD class."""
    v = np.asarray(class_mean_centered, dtype=float)
    return float(np.linalg.norm(sub.basis @ v))


@dataclass(frozen=True)
class NCReport:
    nc1_delta: float
    nc1_ratio: float
    nc2_norm_mean: float
    nc2_norm_std: float
    nc2_cos_mean: float
    nc2_cos_std: float
    nc2_cos_target: float
    nc3_alignment: float
    nc4_agreement: float
    nc5_projection: float


def nc_report(data, stats, head_weights, head_bias=None, eval_centered_means=None, tol=1e-6) -> NCReport:
    """All NC metrics for one feature set.

    ``nc5_projection`` averages the projection norms of ``eval_centered_means``
    (``d x m``) onto the span of the training centered means; by default the
    training means themselves are used.
    """
    delta, ratio = nc1(data, stats)
    r2 = nc2(stats)
    sub = active_subspace(stats.centered, tol)
    probe = stats.centered if eval_centered_means is None else np.asarray(eval_centered_means)
    nc5 = float(np.mean([nc5_projection(v, sub) for v in probe.T]))
    return NCReport(
        nc1_delta=delta,
        nc1_ratio=ratio,
        nc2_norm_mean=r2.norm_mean,
        nc2_norm_std=r2.norm_std,
        nc2_cos_mean=r2.cos_mean,
        nc2_cos_std=r2.cos_std,
        nc2_cos_target=r2.cos_target,
        nc3_alignment=nc3(head_weights, stats),
        nc4_agreement=nc4(data, stats, head_weights, head_bias),
        nc5_projection=nc5,
    )


# --- separability -----------------------------------------------------------


def snr_moments(mu1, mu2, cov1, cov2) -> float:
    diff = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    signal = float(diff @ diff)
    noise = float(np.trace(cov1) + np.trace(cov2))
    if noise == 0:
        if signal == 0:
            raise ValueError("SNR undefined: equal means and zero covariance")
        return math.inf
    return signal / noise


def snr(stats: ClassStats, c1, c2) -> float:
    """``||mu1 - mu2||^2 / Tr(S1 + S2)``."""
    i, j = stats.index(c1), stats.index(c2)
    return snr_moments(stats.means[i], stats.means[j], stats.covs[i], stats.covs[j])


def default_ridge(cov_sum: np.ndarray) -> float:
    d = cov_sum.shape[0]
    return 1e-6 * float(np.trace(cov_sum)) / d


def mahalanobis_sq_moments(mu1, mu2, cov1, cov2, ridge: float | None = 0.0) -> float:
    """``(mu1-mu2)^T (S1 + S2 + ridge I)^{-1} (mu1-mu2)``.

    With ``ridge=0`` and a singular sum, the mean difference is projected onto
    the covariance column space and the pseudoinverse is used; a
    ``RankDeficiencyWarning`` is emitted in that case.
    """
    diff = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    A = np.asarray(cov1, dtype=float) + np.asarray(cov2, dtype=float)
    A = 0.5 * (A + A.T)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(diff))):
        raise ValueError("non-finite moments")
    if ridge is None:
        ridge = default_ridge(A)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    A = A + ridge * np.eye(A.shape[0])
    w, V = np.linalg.eigh(A)
    top = max(w.max(), 0.0)
    keep = w > 1e-12 * top if top > 0 else np.zeros_like(w, dtype=bool)
    if not keep.all():
        warnings.warn(
            f"covariance sum has rank {int(keep.sum())} < {len(w)}; using pseudoinverse on its column space",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    coef = V[:, keep].T @ diff
    return float(np.sum(coef**2 / w[keep]))


def mahalanobis_sq(stats: ClassStats, c1, c2, ridge: float | None = None) -> float:
    """Squared Mahalanobis distance between two classes; ``ridge=None`` means ``1e-6 Tr/d``."""
    i, j = stats.index(c1), stats.index(c2)
    return mahalanobis_sq_moments(stats.means[i], stats.means[j], stats.covs[i], stats.covs[j], ridge)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def separability_from_md(d_m_sq: float) -> float:
    """Best two-class linear accuracy for equal-covariance Gaussians, ``Phi(sqrt(d2)/2)``."""
    if d_m_sq < 0 or math.isnan(d_m_sq):
        raise ValueError("squared Mahalanobis distance must be non-negative")
    if math.isinf(d_m_sq):
        return 1.0
    return 1.0 - normal_cdf(-math.sqrt(d_m_sq) / 2.0)
