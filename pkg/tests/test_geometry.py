import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collapselab.geometry import (
    DimensionError,
    active_subspace,
    build_simplex_etf,
    centering_matrix,
    gram,
    gram_pseudoinverse,
    multi_head_etf,
    numerical_rank,
    orthogonal_complement,
    pairwise_cosines,
    project,
)


def test_etf_k2_gram():
    etf = build_simplex_etf(2, 2, 1.0)
    np.testing.assert_allclose(gram(etf.means), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-14)


def test_etf_k3_cosines():
    etf = build_simplex_etf(3, 4, 2.0)
    np.testing.assert_allclose(pairwise_cosines(etf.means), -0.5, atol=1e-12)


def test_etf_rank_with_rotation():
    assert numerical_rank(build_simplex_etf(4, 8, 1.0, rotation_seed=7).means) == 3


def test_etf_rejects_small_dimension():
    with pytest.raises(DimensionError):
        build_simplex_etf(5, 3)


@given(K=st.integers(2, 16), extra=st.integers(0, 20), beta=st.floats(0.1, 10), seed=st.integers(0, 1000))
def test_etf_invariants(K, extra, beta, seed):
    d = K - 1 + extra
    etf = build_simplex_etf(K, d, beta, rotation_seed=seed)
    np.testing.assert_allclose(gram(etf.means), beta * centering_matrix(K), atol=1e-10 * beta)
    np.testing.assert_allclose(etf.means.sum(axis=1), 0, atol=1e-10)
    assert numerical_rank(etf.means) == K - 1


def test_gram_zero_and_dot_products(rng):
    assert not gram(np.zeros((3, 2))).any()
    M = rng.normal(size=(3, 2))
    expected = [[sum(M[k, i] * M[k, j] for k in range(3)) for j in range(2)] for i in range(2)]
    np.testing.assert_allclose(gram(M), expected, atol=1e-14)


def test_gram_pinv_etf_closed_form():
    etf = build_simplex_etf(3, 3, 2.0)
    np.testing.assert_allclose(gram_pseudoinverse(etf.means), 0.5 * centering_matrix(3), atol=1e-12)


def test_gram_pinv_identity_and_penrose(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
    np.testing.assert_allclose(gram_pseudoinverse(q), np.eye(4), atol=1e-12)
    G = gram(build_simplex_etf(5, 5).means)
    np.testing.assert_allclose(G @ gram_pseudoinverse(build_simplex_etf(5, 5).means) @ G, G, atol=1e-10)


@given(K=st.integers(2, 10), r=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_gram_pinv_penrose_conditions(K, r, seed):
    r = min(r, K)
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(12, r)) @ rng.normal(size=(r, K))
    G, P = gram(M), gram_pseudoinverse(M)
    scale = max(1.0, np.abs(G).max())
    assert np.allclose(G @ P @ G, G, atol=1e-8 * scale)
    assert np.allclose(P @ G @ P, P, atol=1e-8 * max(1.0, np.abs(P).max()))
    assert np.allclose((G @ P).T, G @ P, atol=1e-8)
    assert np.allclose((P @ G).T, P @ G, atol=1e-8)


def test_gram_pinv_keeps_ones_in_null_space():
    for K in range(2, 12):
        P = gram_pseudoinverse(build_simplex_etf(K, K + 3, 1.5, rotation_seed=K).means)
        np.testing.assert_allclose(P @ np.ones(K), 0, atol=1e-10)


def test_active_subspace_ranks():
    assert active_subspace(build_simplex_etf(4, 10).means).rank == 3
    col = np.array([[0.0], [3.0], [4.0]])
    sub = active_subspace(col)
    assert sub.rank == 1
    np.testing.assert_allclose(np.abs(sub.basis[0]), [0, 0.6, 0.8], atol=1e-14)
    assert active_subspace(multi_head_etf(2, 4, 8)).rank == 6
    assert active_subspace(np.zeros((5, 3))).rank == 0


def test_active_subspace_rejects_bad_tol():
    with pytest.raises(ValueError):
        active_subspace(np.eye(3), tol=0)


def test_project_examples():
    sub = active_subspace(np.array([[1.0], [0.0]]))
    a, r = project(np.array([3.0, 4.0]), sub)
    np.testing.assert_allclose(np.abs(a), [3, 0], atol=1e-14)
    np.testing.assert_allclose(r, [0, 4], atol=1e-14)
    with pytest.raises(DimensionError):
        project(np.ones(3), sub)


@given(seed=st.integers(0, 10_000), rank=st.integers(1, 7))
def test_project_pythagoras(seed, rank):
    rng = np.random.default_rng(seed)
    sub = active_subspace(rng.normal(size=(8, rank)))
    v = rng.normal(size=(5, 8))
    a, r = project(v, sub)
    np.testing.assert_allclose(a + r, v, atol=1e-12)
    np.testing.assert_allclose(r @ sub.basis.T, 0, atol=1e-10)
    np.testing.assert_allclose((a**2).sum(1) + (r**2).sum(1), (v**2).sum(1), rtol=1e-10)
    comp = orthogonal_complement(sub)
    assert comp.rank == 8 - sub.rank
    np.testing.assert_allclose(comp.basis @ sub.basis.T, 0, atol=1e-10)


def test_numerical_rank_examples(rng):
    assert numerical_rank(np.eye(5)) == 5
    assert numerical_rank(build_simplex_etf(6, 6).means) == 5
    assert numerical_rank(np.outer(rng.normal(size=4), rng.normal(size=7))) == 1
    assert numerical_rank(np.zeros((3, 3))) == 0
