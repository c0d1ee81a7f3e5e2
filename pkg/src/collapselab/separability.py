"""Linear read-outs on frozen features: logistic probe, LDA variants, brute force."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stats import ClassStats, LabeledFeatures


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    classes: np.ndarray  # (K,) label of each row
    provenance: str = "probe"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        self.classes = np.asarray(self.classes).reshape(-1)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("classifier has non-finite parameters")

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.weights.shape[1]:
            raise ValueError(f"expected {self.weights.shape[1]} features, got {x.shape[1]}")
        return x @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest row
        return self.classes[np.argmax(self.scores(x), axis=1)]


def evaluate(clf: LinearClassifier, data: LabeledFeatures) -> float:
    if data.n == 0:
        raise ValueError("cannot evaluate on empty data")
    return float(np.mean(clf.predict(data.features) == data.class_ids))


# --- logistic probe -----------------------------------------------------------


def _probe_objective(W, b, X, Y, reg):
    """Mean cross-entropy + ``reg/2 ||W||^2`` and its gradient."""
    Z = X @ W.T + b
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    s = E.sum(axis=1)
    loss = float(np.mean(np.log(s) - np.einsum("ij,ij->i", Z, Y))) + 0.5 * reg * float(np.sum(W * W))
    R = (E / s[:, None] - Y) / X.shape[0]
    gW = R.T @ X + reg * W
    gb = R.sum(axis=0)
    return loss, gW, gb


def train_probe(data: LabeledFeatures, inv_reg_C: float = 100.0, max_iter: int = 10_000, tol: float = 1e-6) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Minimises ``sum_i CE_i + ||W||^2 / (2C)`` (bias unpenalised), scaled by
    ``1/n``. Steps start from a Barzilai-Borwein guess and are accepted by an
    Armijo backtracking line search. Stops when the gradient norm of the
    scaled objective drops below ``tol``.
    """
    classes = np.unique(data.class_ids)
    if len(classes) < 2:
        raise ValueError("a probe needs at least two classes")
    if inv_reg_C <= 0:
        raise ValueError("C must be positive")
    X = data.features
    n, d = X.shape
    K = len(classes)
    Y = (data.class_ids[:, None] == classes[None, :]).astype(float)
    reg = 1.0 / (inv_reg_C * n)
    W = np.zeros((K, d))
    b = np.zeros(K)
    loss, gW, gb = _probe_objective(W, b, X, Y, reg)
    # 1/L for the mean cross-entropy: L <= 0.5 * (max ||x||^2 + 1) + reg
    step = 1.0 / (0.5 * (np.max(np.sum(X * X, axis=1)) + 1.0) + reg)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gnorm2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        if math.sqrt(gnorm2) < tol:
            converged = True
            it -= 1
            break
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            loss_new, gW_new, gb_new = _probe_objective(W_new, b_new, X, Y, reg)
            if loss_new <= loss - 0.5 * step * gnorm2 or step < 1e-20:
                break
            step *= 0.5
        sW, sb = W_new - W, b_new - b
        yW, yb = gW_new - gW, gb_new - gb
        sy = float(np.sum(sW * yW) + np.sum(sb * yb))
        W, b, loss, gW, gb = W_new, b_new, loss_new, gW_new, gb_new
        if sy > 0:
            step = float(np.sum(sW * sW) + np.sum(sb * sb)) / sy
    else:
        converged = math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb))) < tol
    return LinearClassifier(W, b, classes, "probe", {"converged": converged, "n_iter": it, "loss": loss})


# --- LDA counterfactuals ------------------------------------------------------

LDA_VARIANTS = {
    "full_population": ("population", "pooled-population"),
    "population_means_id_cov": ("population", "identity"),
    "observed_means_id_cov": ("observed", "identity"),
    "full_buffer": ("observed", "pooled-observed"),
}


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def lda(means_source: str, cov_source: str, stats_pop: ClassStats, stats_obs: ClassStats | None = None, ridge: float = 0.0) -> LinearClassifier:
    """LDA with interchangeable mean / covariance estimates.

    Predicts the class nearest in the shared Mahalanobis metric, i.e. the
    maximiser of ``mu_c^T S^{-1} x - mu_c^T S^{-1} mu_c / 2``.
    """
    if means_source not in ("population", "observed"):
        raise ValueError(f"unknown means source {means_source!r}")
    if cov_source not in ("pooled-population", "pooled-observed", "identity"):
        raise ValueError(f"unknown covariance source {cov_source!r}")
    needs_obs = means_source == "observed" or cov_source == "pooled-observed"
    if needs_obs and stats_obs is None:
        raise ValueError("observed statistics required for this variant")
    src = stats_obs if means_source == "observed" else stats_pop
    if needs_obs and list(stats_obs.keys) != list(stats_pop.keys):
        raise ValueError("population and observed statistics must cover the same classes in the same order")
    means = src.means
    d = means.shape[1]
    if cov_source == "identity":
        S = np.eye(d)
    else:
        cs = stats_pop if cov_source == "pooled-population" else stats_obs
        if np.any(cs.counts < 2):
            raise ValueError("pooled covariance needs at least two samples per class")
        S = cs.pooled_covariance() + ridge * np.eye(d)
    try:
        L = np.linalg.cholesky(S)
        if np.min(np.diag(L)) ** 2 < 1e-12 * np.max(np.diag(S)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("pooled covariance is singular; pass ridge > 0") from None
    Sinv_mu = np.linalg.solve(S, means.T).T  # (K, d)
    bias = -0.5 * np.sum(Sinv_mu * means, axis=1)
    return LinearClassifier(Sinv_mu, bias, np.asarray(src.keys), f"lda:{means_source}/{cov_source}")


# --- brute-force oracle -------------------------------------------------------


def _unit_directions(d: int, resolution: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    theta = np.linspace(0, np.pi, resolution // 2 + 1)
    phi = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)


def _best_threshold_accuracy(proj: np.ndarray, positive: np.ndarray) -> float:
    """Best accuracy of ``proj > threshold -> positive`` over all thresholds."""
    order = np.argsort(proj, kind="stable")
    p, pos = proj[order], positive[order].astype(int)
    n = len(p)
    # candidate cut after position i (0..n); only between distinct values
    neg_below = np.concatenate([[0], np.cumsum(1 - pos)])
    pos_above = pos.sum() - np.concatenate([[0], np.cumsum(pos)])
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = p[1:] > p[:-1]
    return float(np.max((neg_below + pos_above)[valid]) / n)


def brute_force_linear(data: LabeledFeatures, angular_resolution: int = 720) -> float:
    """Best two-class linear accuracy by direction grid + exact threshold sweep."""
    if data.d > 3:
        raise NotImplementedError("brute force is limited to d <= 3")
    classes = np.unique(data.class_ids)
    if len(classes) != 2:
        raise ValueError("brute force needs exactly two classes")
    positive = data.class_ids == classes[1]
    best = 0.0
    for w in _unit_directions(data.d, angular_resolution):
        best = max(best, _best_threshold_accuracy(data.features @ w, positive))
    return best
