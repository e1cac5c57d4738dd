import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_full, random_tt
from tt_quotient import tensor as tt
from tt_quotient.tensor import TTTensor


def test_unfolding_is_colexicographic():
    X = np.arange(1, 9, dtype=float).reshape((2, 2, 2), order="F")
    np.testing.assert_array_equal(tt.k_unfold(X, 1), [[1, 3, 5, 7], [2, 4, 6, 8]])
    np.testing.assert_array_equal(tt.k_fold(tt.k_unfold(X, 2), X.shape), X)


def test_k_unfold_rejects_bad_k():
    with pytest.raises(ValueError):
        tt.k_unfold(np.zeros((2, 2, 2)), 3)


def test_core_unfoldings_roundtrip(rng):
    G = rng.standard_normal((2, 3, 4))
    L = tt.left_unfold(G)
    R = tt.right_unfold(G)
    assert L.shape == (6, 4) and R.shape == (2, 12)
    # row a + r0*i of L is G[a, i, :]
    assert np.array_equal(L[1 + 2 * 2], G[1, 2])
    assert np.array_equal(R[:, 2 + 3 * 1], G[:, 2, 1])
    np.testing.assert_array_equal(tt.left_fold(L, G.shape), G)
    np.testing.assert_array_equal(tt.right_fold(R, G.shape), G)
    with pytest.raises(ValueError):
        tt.left_fold(R, G.shape)


def test_mode_product_matches_einsum(rng):
    X = rng.standard_normal((3, 4, 5))
    A = rng.standard_normal((2, 4))
    np.testing.assert_allclose(tt.mode_product(X, 1, A), np.einsum("aib,ji->ajb", X, A))
    with pytest.raises(ValueError):
        tt.mode_product(X, 0, A)


def test_qr_pos_diagonal_nonnegative(rng):
    A = rng.standard_normal((7, 3))
    Q, R = tt.qr_pos(A)
    assert np.all(np.diag(R) >= 0)
    np.testing.assert_allclose(Q @ R, A, atol=1e-14)


def test_constructor_validation():
    with pytest.raises(ValueError):
        TTTensor([np.zeros((2, 3, 1))])
    with pytest.raises(ValueError):
        TTTensor([np.zeros((1, 3, 2)), np.zeros((3, 3, 1))])
    X = TTTensor([np.ones((1, 2, 2)), np.ones((2, 3, 1))])
    assert X.dims == (2, 3) and X.ranks == (1, 2, 1)
    with pytest.raises(ValueError):
        X.cores[0][0, 0, 0] = 5.0


def test_tt_full_against_naive_oracle(rng):
    X = random_tt(rng, (3, 4, 2, 3), (1, 2, 3, 2, 1))
    np.testing.assert_allclose(tt.tt_full(X), naive_full(X), rtol=1e-13, atol=1e-13)
    assert tt.tt_entry(X, (2, 1, 0, 2)) == pytest.approx(naive_full(X)[2, 1, 0, 2], rel=1e-13)
    with pytest.raises(IndexError):
        tt.tt_entry(X, (3, 0, 0, 0))


def test_dense_budget_guard(monkeypatch, rng):
    X = random_tt(rng, (4, 4, 4), (1, 2, 2, 1))
    monkeypatch.setattr(tt, "DENSE_BUDGET", 10)
    with pytest.raises(tt.BudgetExceededError):
        tt.tt_full(X)


def test_interfaces_reproduce_k_unfolding(rng):
    X = random_tt(rng, (3, 4, 2, 3), (1, 2, 3, 2, 1))
    F = naive_full(X)
    itf = tt.interfaces(X)
    for k in range(1, 4):
        np.testing.assert_allclose(itf.left[k] @ itf.right[k].T, tt.k_unfold(F, k), atol=1e-12)


def test_gram_cache_against_interfaces(rng):
    X = random_tt(rng, (3, 4, 2, 3), (1, 2, 3, 2, 1))
    itf = tt.interfaces(X)
    gc = tt.gram_cache(X)
    for j in range(5):
        np.testing.assert_allclose(gc.left[j], itf.left[j].T @ itf.left[j], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gc.right[j], itf.right[j].T @ itf.right[j], rtol=1e-12, atol=1e-12)


def test_s_chain_factors_right_gram(rng):
    X = random_tt(rng, (3, 4, 5), (1, 3, 2, 1))
    s = tt.s_chain(X).s
    gc = tt.gram_cache(X)
    for j in range(4):
        np.testing.assert_allclose(s[j].T @ s[j], gc.right[j], rtol=1e-11, atol=1e-12)


def test_orthogonalization_preserves_tensor(rng):
    X = random_tt(rng, (4, 5, 3, 4), (1, 3, 4, 2, 1))
    F = naive_full(X)
    L = tt.left_orthogonalize(X)
    R = tt.right_orthogonalize(X)
    assert L.left_orthogonal
    np.testing.assert_allclose(tt.tt_full(L), F, atol=1e-12)
    np.testing.assert_allclose(tt.tt_full(R), F, atol=1e-12)
    for c in L.cores[:-1]:
        M = tt.left_unfold(c)
        np.testing.assert_allclose(M.T @ M, np.eye(M.shape[1]), atol=1e-13)
    for c in R.cores[1:]:
        M = tt.right_unfold(c)
        np.testing.assert_allclose(M @ M.T, np.eye(M.shape[0]), atol=1e-13)


def test_rank_deficiency_detected(rng):
    X = random_tt(rng, (4, 4, 4), (1, 2, 2, 1))
    cores = list(X.cores)
    cores[0] = np.repeat(cores[0][:, :, :1], 2, axis=2)
    Y = TTTensor(cores)
    assert not tt.is_full_rank(Y)
    with pytest.raises(tt.RankDeficiencyError):
        tt.left_orthogonalize(Y)
    assert tt.tt_cond(Y) == math.inf
    assert tt.is_full_rank(X)


def test_tt_svd_exact_and_truncated(rng):
    X = random_tt(rng, (4, 5, 3, 4), (1, 2, 3, 2, 1))
    F = naive_full(X)
    Y = tt.tt_svd(F, (1, 2, 3, 2, 1))
    assert Y.ranks == (1, 2, 3, 2, 1)
    np.testing.assert_allclose(tt.tt_full(Y), F, atol=1e-11)
    Z = tt.tt_svd(F + 1e-3 * rng.standard_normal(F.shape), tol=1e-2)
    assert Z.ranks == (1, 2, 3, 2, 1)
    with pytest.raises(ValueError):
        tt.tt_svd(F, (1, 5, 3, 2, 1))


def test_tt_svd_quasi_optimal(rng):
    # error of a rank-capped TT-SVD is bounded by sqrt(d-1) times the best
    # single-unfolding truncation error
    F = rng.standard_normal((5, 5, 5))
    Y = tt.tt_svd(F, 2)
    err = np.linalg.norm(tt.tt_full(Y) - F)
    tails = [np.linalg.norm(np.linalg.svd(tt.k_unfold(F, k), compute_uv=False)[2:]) for k in (1, 2)]
    assert err <= math.sqrt(2) * max(tails) + 1e-12
    assert err >= max(tails) - 1e-12


def test_tt_rounding_matches_dense_svd(rng):
    X = random_tt(rng, (4, 5, 4), (1, 3, 3, 1))
    Y = random_tt(rng, (4, 5, 4), (1, 2, 2, 1))
    # stack X and Y into a rank-5 representation of X + Y
    c0 = np.concatenate([X.cores[0], Y.cores[0]], axis=2)
    c1 = np.zeros((5, 5, 5))
    c1[:3, :, :3] = X.cores[1]
    c1[3:, :, 3:] = Y.cores[1]
    c2 = np.concatenate([X.cores[2], Y.cores[2]], axis=0)
    S = TTTensor([c0, c1, c2])
    F = naive_full(X) + naive_full(Y)
    np.testing.assert_allclose(tt.tt_full(tt.tt_rounding(S, 3)), tt.tt_full(tt.tt_svd(F, 3)), atol=1e-11)
    with pytest.raises(ValueError):
        tt.tt_rounding(X, 7)


def test_unfolding_singular_values_match_dense(rng):
    X = random_tt(rng, (4, 3, 5, 3), (1, 2, 3, 2, 1))
    F = naive_full(X)
    for k, s in enumerate(tt.unfolding_singular_values(X), start=1):
        dense = np.linalg.svd(tt.k_unfold(F, k), compute_uv=False)[: s.size]
        np.testing.assert_allclose(s, dense, rtol=1e-10)


def test_inner_norm_distance(rng):
    X = random_tt(rng, (3, 4, 5), (1, 2, 3, 1))
    Y = random_tt(rng, (3, 4, 5), (1, 3, 2, 1))
    FX, FY = naive_full(X), naive_full(Y)
    assert tt.tt_inner(X, Y) == pytest.approx(np.vdot(FX, FY), rel=1e-12)
    assert tt.tt_norm(X) == pytest.approx(np.linalg.norm(FX), rel=1e-12)
    assert tt.tt_distance(X, Y) == pytest.approx(np.linalg.norm(FX - FY), rel=1e-12)


def test_distance_resolves_tiny_differences(rng):
    X = random_tt(rng, (6, 6, 6), (1, 3, 3, 1))
    cores = list(X.cores)
    cores[1] = cores[1] + 1e-12 * rng.standard_normal(cores[1].shape)
    Y = TTTensor(cores)
    expect = np.linalg.norm(tt.tt_full(X) - tt.tt_full(Y))
    assert tt.tt_distance(X, Y) == pytest.approx(expect, rel=1e-3)


def test_manifold_dim_formula():
    # 100*5 + 5*100*5 + 5*100 - 25 - 25
    assert tt.manifold_dim((100, 100, 100), (1, 5, 5, 1)) == 3450
    assert tt.manifold_dim((4, 4), (1, 1, 1)) == 7


def test_check_feasible_ranks():
    tt.check_feasible_ranks((3, 3), (1, 3, 1))
    with pytest.raises(ValueError):
        tt.check_feasible_ranks((2, 5), (1, 3, 1))
    with pytest.raises(ValueError):
        tt.check_feasible_ranks((2, 5), (2, 1, 1))


def test_cho_solve_spd_sides_and_fallback(rng):
    B = rng.standard_normal((4, 4))
    A = B @ B.T + np.eye(4)
    C = rng.standard_normal((4, 2))
    np.testing.assert_allclose(tt.cho_solve_spd(A, C), np.linalg.solve(A, C), rtol=1e-10)
    np.testing.assert_allclose(tt.cho_solve_spd(A, C.T, side="right"), C.T @ np.linalg.inv(A), rtol=1e-10)
    singular = np.zeros((2, 2))
    singular[0, 0] = 1.0
    out = tt.cho_solve_spd(singular, np.array([[1.0], [0.0]]))
    assert np.all(np.isfinite(out))


@settings(max_examples=25, deadline=None)
@given(
    dims=st.lists(st.integers(2, 4), min_size=2, max_size=4),
    r=st.integers(1, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_property_orthogonalize_and_svd_roundtrip(dims, r, seed):
    d = len(dims)
    ranks = [1]
    for k in range(1, d):
        ranks.append(min(r, math.prod(dims[:k]), math.prod(dims[k:])))
    ranks.append(1)
    X = random_tt(np.random.default_rng(seed), dims, ranks)
    F = tt.tt_full(X)
    scale = max(np.abs(F).max(), 1.0)
    np.testing.assert_allclose(tt.tt_full(tt.left_orthogonalize(X, check=False)), F, atol=1e-11 * scale)
    np.testing.assert_allclose(tt.tt_full(tt.tt_svd(F, ranks)), F, atol=1e-10 * scale)
