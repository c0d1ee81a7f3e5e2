"""Simplex ETFs, active subspaces and Gram-matrix helpers.

Mean matrices are stored column-wise (``d x K``), one centered class mean per
column. ``beta`` is the scale of the Gram matrix, i.e. ``G = beta (I - 11^T/K)``,
so every nonzero eigenvalue of ``G`` equals ``beta`` and each column has
squared norm ``beta (K - 1) / K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RANK_TOL = 1e-6


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SimplexETF:
    means: np.ndarray  # (d, K)
    beta: float

    @property
    def K(self) -> int:
        return self.means.shape[1]

    @property
    def d(self) -> int:
        return self.means.shape[0]

    def scaled(self, beta: float) -> "SimplexETF":
        """Same directions, Gram scale ``beta``."""
        if self.beta == 0:
            raise ValueError("cannot rescale a zero ETF")
        return SimplexETF(self.means * np.sqrt(beta / self.beta), float(beta))


@dataclass(frozen=True)
class Subspace:
    basis: np.ndarray  # (r, d), orthonormal rows
    tol: float

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def projector(self) -> np.ndarray:
        return self.basis.T @ self.basis


def random_orthogonal(d: int, seed: int) -> np.ndarray:
    """Haar-distributed ``d x d`` orthogonal matrix from a seeded Gaussian."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    # sign fix makes the distribution uniform
    return q * np.sign(np.diag(r))


def centering_matrix(K: int) -> np.ndarray:
    return np.eye(K) - np.ones((K, K)) / K


def build_simplex_etf(K: int, d: int, beta: float = 1.0, rotation_seed: int | None = None) -> SimplexETF:
    if K < 2:
        raise DimensionError(f"need K >= 2 classes, got {K}")
    if d < K - 1:
        raise DimensionError(f"a {K}-class simplex needs d >= {K - 1}, got d={d}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    # orthonormal basis of the complement of 1 in R^K, via the SVD of the centering matrix
    u, _, _ = np.linalg.svd(centering_matrix(K))
    V = u[:, : K - 1]  # (K, K-1), V V^T = I - 11^T/K
    E = np.zeros((d, K - 1))
    E[: K - 1, : K - 1] = np.eye(K - 1)
    means = np.sqrt(beta) * E @ V.T
    # exact centering removes the O(eps) drift of the SVD basis
    means -= means.mean(axis=1, keepdims=True)
    if rotation_seed is not None:
        means = random_orthogonal(d, rotation_seed) @ means
    return SimplexETF(means, float(beta))


def multi_head_etf(n_heads: int, K: int, d: int, betas=1.0, rotation_seed: int | None = None) -> np.ndarray:
    """Concatenate ``n_heads`` ETFs living in mutually orthogonal blocks.

    Returns the ``d x (n_heads*K)`` matrix of per-head centered means, the
    block structure that multi-head training converges to when tasks occupy
    orthogonal subspaces.
    """
    need = n_heads * (K - 1)
    if d < need:
        raise DimensionError(f"{n_heads} orthogonal {K}-simplices need d >= {need}, got {d}")
    betas = np.broadcast_to(np.asarray(betas, dtype=float), (n_heads,))
    blocks = np.zeros((d, n_heads * K))
    for m in range(n_heads):
        etf = build_simplex_etf(K, K - 1, betas[m])
        rows = slice(m * (K - 1), (m + 1) * (K - 1))
        blocks[rows, m * K : (m + 1) * K] = etf.means
    if rotation_seed is not None:
        blocks = random_orthogonal(d, rotation_seed) @ blocks
    return blocks


def gram(means: np.ndarray) -> np.ndarray:
    means = np.asarray(means, dtype=float)
    g = means.T @ means
    return 0.5 * (g + g.T)


def gram_pseudoinverse(means: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse of ``gram(means)``.

    For an exact ETF this is ``(1/beta)(I - 11^T/K)``.
    """
    g = gram(means)
    u, s, vt = np.linalg.svd(g)
    if s.size == 0 or s[0] == 0:
        return np.zeros_like(g)
    keep = s > tol * s[0]
    pinv = (vt[keep].T / s[keep]) @ u[:, keep].T
    return 0.5 * (pinv + pinv.T)


def _singular_values(matrix: np.ndarray) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return np.zeros(0)
    return np.linalg.svd(matrix, compute_uv=False)


def numerical_rank(matrix, tol: float = DEFAULT_RANK_TOL) -> int:
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = _singular_values(matrix)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def active_subspace(centered_means: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> Subspace:
    """Orthonormal basis of the column span of ``centered_means`` (``d x K``)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = np.asarray(centered_means, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    d = m.shape[0]
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return Subspace(np.zeros((0, d)), tol)
    r = int(np.sum(s > tol * s[0]))
    return Subspace(u[:, :r].T.copy(), tol)


def project(vectors: np.ndarray, sub: Subspace) -> tuple[np.ndarray, np.ndarray]:
    """Split row vectors into their component in ``sub`` and the orthogonal residual."""
    v = np.asarray(vectors, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if v.shape[1] != sub.dim:
        raise DimensionError(f"vectors have dimension {v.shape[1]}, subspace lives in {sub.dim}")
    in_span = (v @ sub.basis.T) @ sub.basis
    residual = v - in_span
    if single:
        return in_span[0], residual[0]
    return in_span, residual


def orthogonal_complement(sub: Subspace) -> Subspace:
    d = sub.dim
    if sub.rank == 0:
        return Subspace(np.eye(d), sub.tol)
    u, _, _ = np.linalg.svd(sub.basis.T, full_matrices=True)
    return Subspace(u[:, sub.rank :].T.copy(), sub.tol)


def pairwise_cosines(means: np.ndarray) -> np.ndarray:
    """Cosines between distinct columns (upper triangle, flattened)."""
    m = np.asarray(means, dtype=float)
    n = np.linalg.norm(m, axis=0)
    unit = m / n
    c = unit.T @ unit
    iu = np.triu_indices(m.shape[1], k=1)
    return c[iu]
