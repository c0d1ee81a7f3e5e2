"""Terminal-phase dynamics of forgotten classes and the replay mixture model.

Conventions: ``beta_t`` is the per-head Gram scale of the training class means
(see :mod:`collapselab.geometry`), ``delta_t`` the total within-class variance
of collapsed classes, and ``upsilon = 1 - eta*lam`` the per-step weight-decay
shrink factor. The closed-form predictors evaluate Theta-expressions with
unit constants: they are meant for trends and ratios, not absolute values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SimplexETF, active_subspace, orthogonal_complement
from .stats import LabeledFeatures


@dataclass(frozen=True)
class Schedule:
    """Scalar function of the step offset ``s = t - t0``.

    kind: ``constant`` -> value; ``linear`` -> value + rate*s;
    ``geometric`` -> value * rate**s; ``table`` -> piecewise-constant lookup
    in ``table`` (pairs of (offset, value), sorted by offset).
    """

    kind: str = "constant"
    value: float = 1.0
    rate: float = 0.0
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "geometric", "table"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "table" and not self.table:
            raise ValueError("table schedule needs entries")
        if self.kind == "geometric" and self.rate < 0:
            raise ValueError("geometric rate must be non-negative")

    def __call__(self, s: float) -> float:
        if self.kind == "constant":
            out = self.value
        elif self.kind == "linear":
            out = self.value + self.rate * s
        elif self.kind == "geometric":
            out = self.value * self.rate**s
        else:
            out = self.table[0][1]
            for offset, val in self.table:
                if s >= offset:
                    out = val
        if not math.isfinite(out) or out < 0:
            raise ValueError(f"schedule produced invalid value {out} at offset {s}")
        return float(out)


@dataclass(frozen=True)
class TPTParams:
    eta: float
    lam: float
    t0: int = 0
    beta_schedule: Schedule = field(default_factory=Schedule)
    delta_schedule: Schedule = field(default_factory=lambda: Schedule("geometric", 1.0, 0.99))

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 0:
            raise ValueError("weight decay must be non-negative")
        if self.eta * self.lam >= 1:
            raise ValueError(f"eta*lambda = {self.eta * self.lam} must be < 1")

    def beta(self, t) -> float:
        return self.beta_schedule(t - self.t0)

    def delta(self, t) -> float:
        return self.delta_schedule(t - self.t0)


def decay_factor(tpt: TPTParams) -> float:
    ups = 1.0 - tpt.eta * tpt.lam
    if not 0 < ups <= 1:
        raise ValueError("eta*lambda must lie in [0, 1)")
    return ups


def _offset(t, tpt: TPTParams) -> int:
    if t < tpt.t0:
        raise ValueError(f"step {t} precedes the terminal phase onset t0={tpt.t0}")
    return t - tpt.t0


def perp_decay(tpt: TPTParams, t) -> float:
    """``upsilon**(t - t0)``, the shrink of every off-subspace feature component."""
    return decay_factor(tpt) ** _offset(t, tpt)


def ood_mean_at(t, mu_perp_t0, tpt: TPTParams) -> np.ndarray:
    return perp_decay(tpt, t) * np.asarray(mu_perp_t0, dtype=float)


def aggregate_beta(betas, mode: str = "sum") -> float:
    """Combine per-head scales by ``sum`` (default) or ``mean``."""
    betas = np.asarray(betas, dtype=float)
    if mode == "sum":
        return float(betas.sum())
    if mode == "mean":
        return float(betas.mean())
    raise ValueError(f"unknown aggregation {mode!r}")


def ood_variance_bounds(sigma_b, tpt: TPTParams, t, n_heads: int = 1, K: int | None = None, v_perp: float = 0.0):
    """Sandwich for the total variance of an OOD class at step ``t``.

    ``sigma_b`` is the covariance of the coefficients ``b`` in ``phi = U b + perp``
    (size ``n_heads*K``), heads occupying orthogonal blocks each with Gram
    ``beta_t (I - 11^T/K)``. ``v_perp`` is the off-subspace variance at ``t0``.
    Returns ``(low, high)`` with

        low  = beta_t * sum_m [Tr(S_m) - lambda_max(S_m)] + upsilon^{2(t-t0)} v_perp
        high = beta_t * Tr(sigma_b)                       + upsilon^{2(t-t0)} v_perp
    """
    S = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("sigma_b must be square")
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("sigma_b must be symmetric")
    eig = np.linalg.eigvalsh(S)
    if eig.min() < -1e-10 * max(1.0, abs(eig).max()):
        raise ValueError("sigma_b is not positive semidefinite")
    K = S.shape[0] // n_heads if K is None else K
    if K * n_heads != S.shape[0]:
        raise ValueError(f"sigma_b has size {S.shape[0]}, expected n_heads*K = {n_heads * K}")
    beta = tpt.beta(t)
    c_low = 0.0
    for m in range(n_heads):
        blk = S[m * K : (m + 1) * K, m * K : (m + 1) * K]
        c_low += np.trace(blk) - np.linalg.eigvalsh(blk).max()
    c_high = float(np.trace(S))
    perp = perp_decay(tpt, t) ** 2 * v_perp
    return beta * max(c_low, 0.0) + perp, beta * c_high + perp


@dataclass(frozen=True)
class MixtureParams:
    """One past class under replay.

    ``nc_mean`` is the collapsed class mean (inside the ETF span, at the ETF's
    own scale); ``ood_mean_perp`` the off-span mean at ``t0``. ``sigma_b`` is the
    covariance of the in-span coefficients of the OOD component and ``v_perp``
    its total off-span variance at ``t0``.
    """

    pi: float
    nc_mean: np.ndarray
    ood_mean_perp: np.ndarray
    tpt: TPTParams
    sigma_b: np.ndarray | None = None
    v_perp: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")
        if self.v_perp < 0:
            raise ValueError("v_perp must be non-negative")


def _check_geometry(etf: SimplexETF, mixture: MixtureParams, tol: float = 1e-8):
    sub = active_subspace(etf.means)
    nc = np.asarray(mixture.nc_mean, dtype=float)
    perp = np.asarray(mixture.ood_mean_perp, dtype=float)
    scale = max(1.0, np.linalg.norm(nc))
    if np.linalg.norm(nc - sub.basis.T @ (sub.basis @ nc)) > tol * scale:
        raise ValueError("nc_mean must lie in the span of the ETF")
    if np.linalg.norm(sub.basis @ perp) > tol * max(1.0, np.linalg.norm(perp)):
        raise ValueError("ood_mean_perp must be orthogonal to the span of the ETF")
    return sub


def _labeled(x: np.ndarray, class_id: int) -> LabeledFeatures:
    n = x.shape[0]
    return LabeledFeatures(x, np.full(n, class_id), np.zeros(n, dtype=int), np.full(n, "population", dtype=object))


def sample_ood(n: int, etf: SimplexETF, mixture: MixtureParams, t, seed: int, class_id: int = 0) -> LabeledFeatures:
    """Draw ``n`` OOD features at step ``t``.

    In-span part ``U_t b`` with ``b ~ N(0, sigma_b)`` and ``U_t`` the ETF at scale
    ``beta_t``; off-span part is a Gaussian frozen at ``t0`` around
    ``ood_mean_perp`` and shrunk by ``upsilon**(t - t0)``. The same seed yields
    the same underlying samples at every ``t``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sub = _check_geometry(etf, mixture)
    perp_sub = orthogonal_complement(sub)
    tpt = mixture.tpt
    rng = np.random.default_rng(seed)
    K = etf.K
    sigma_b = np.zeros((K, K)) if mixture.sigma_b is None else np.asarray(mixture.sigma_b, dtype=float)
    b = rng.multivariate_normal(np.zeros(K), sigma_b, size=n, method="eigh")
    U_t = etf.scaled(tpt.beta(t)).means if tpt.beta(t) > 0 else np.zeros_like(etf.means)
    in_span = b @ U_t.T
    r_perp = perp_sub.rank
    if r_perp > 0 and mixture.v_perp > 0:
        z = rng.standard_normal((n, r_perp)) * math.sqrt(mixture.v_perp / r_perp)
        frozen = z @ perp_sub.basis
    else:
        frozen = np.zeros((n, etf.d))
    frozen = frozen + np.asarray(mixture.ood_mean_perp, dtype=float)
    x = in_span + perp_decay(tpt, t) * frozen
    return _labeled(x, class_id)


def sample_mixture(n: int, etf: SimplexETF, mixture: MixtureParams, t, seed: int, class_id: int = 0) -> LabeledFeatures:
    """Draw from ``pi D_NC + (1 - pi) D_OOD`` at step ``t``.

    ``D_NC`` is isotropic around the collapsed mean (rescaled with ``beta_t``)
    with total variance ``delta_t``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_geometry(etf, mixture)
    tpt = mixture.tpt
    rng = np.random.default_rng(seed)
    from_nc = rng.random(n) < mixture.pi
    ood = sample_ood(n, etf, mixture, t, seed=int(rng.integers(2**32)), class_id=class_id).features
    scale = math.sqrt(tpt.beta(t) / etf.beta)
    d = etf.d
    nc = scale * np.asarray(mixture.nc_mean, dtype=float) + rng.standard_normal((n, d)) * math.sqrt(tpt.delta(t) / d)
    x = np.where(from_nc[:, None], nc, ood)
    return _labeled(x, class_id)


def predicted_snr_ood(tpt: TPTParams, t) -> float:
    """``(beta_t / upsilon^{2(t-t0)} + 1)^{-1}``."""
    u = perp_decay(tpt, t) ** 2
    beta = tpt.beta(t)
    if u == 0:
        return 0.0 if beta > 0 else 1.0
    return 1.0 / (beta / u + 1.0)


def replay_ratio_sq(pi1: float, pi2: float | None = None) -> float:
    """``r^2``. With one argument: ``pi^2/(1-pi)^2``; with two: ``(pi1+pi2)^2/(1-pi1-pi2)^2``."""
    p = pi1 if pi2 is None else pi1 + pi2
    if p >= 1:
        return math.inf
    return p * p / ((1 - p) ** 2)


def predicted_snr_replay(pi1, pi2, beta=None, delta=None, tpt: TPTParams | None = None, t=0) -> float:
    """``(r^2 beta + u) / (r^2 delta + beta + u)`` with ``u = upsilon^{2(t-t0)}``.

    ``beta``/``delta`` default to the schedules in ``tpt``. For
    ``pi1 + pi2 >= 1`` the ``r -> inf`` limit ``beta/delta`` is returned.
    """
    if tpt is None:
        raise ValueError("tpt parameters are required")
    beta = tpt.beta(t) if beta is None else float(beta)
    delta = tpt.delta(t) if delta is None else float(delta)
    u = perp_decay(tpt, t) ** 2
    r2 = replay_ratio_sq(pi1, pi2)
    if math.isinf(r2):
        if delta == 0:
            return math.inf
        return beta / delta
    den = r2 * delta + beta + u
    if den == 0:
        return math.inf
    return (r2 * beta + u) / den


def buffer_mean_error_bound(sigma_trace: float, b: int) -> float:
    """RMS error of a ``b``-sample mean, ``sqrt(Tr(Sigma)/b)``."""
    if b < 1:
        raise ValueError("buffer size must be >= 1")
    return math.sqrt(sigma_trace / b)


def pi_from_buffer(rho: float, table: dict | None = None) -> float:
    """Mixing weight for buffer fraction ``rho``; identity unless a table is given."""
    if table is None:
        return float(min(max(rho, 0.0), 1.0))
    keys = sorted(table)
    return float(np.interp(rho, keys, [table[k] for k in keys]))
