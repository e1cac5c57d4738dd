import numpy as np
import pytest

from conftest import naive_full, random_samples, random_tt
from tt_quotient import completion as cp
from tt_quotient.completion import SampleSet, SparseResidual
from tt_quotient.tensor import TTTensor


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SampleSet([[0, 0], [0, 0]], [1.0, 2.0], (2, 2))
    with pytest.raises(ValueError):
        SampleSet([[0, 2]], [1.0], (2, 2))
    with pytest.raises(ValueError):
        SampleSet(np.zeros((0, 2), dtype=int), [], (2, 2))
    with pytest.raises(ValueError):
        SampleSet([[0, 1]], [1.0, 2.0], (2, 2))
    S = SampleSet([[0, 1], [1, 0]], [1.0, 2.0], (2, 2))
    assert len(S) == 2 and S.ndim == 2
    with pytest.raises(ValueError):
        S.values[0] = 3.0


def test_indicator_matrix(rng):
    S = SampleSet([[0, 2], [1, 0], [1, 1]], [1.0, 2.0, 3.0], (2, 3))
    E = S.indicator(1).toarray()
    np.testing.assert_array_equal(E, [[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    S2 = S.with_values([4.0, 5.0, 6.0])
    assert S2.indicator(1) is S.indicator(1)
    np.testing.assert_array_equal(S2.values, [4, 5, 6])


def test_chains_and_residual(rng):
    X = random_tt(rng, (4, 3, 5), (1, 2, 3, 1))
    T = rng.standard_normal((4, 3, 5))
    S = random_samples(rng, T, 25)
    F = naive_full(X)
    ch = cp.sample_chains(X, S)
    np.testing.assert_allclose(ch.entries, F[tuple(S.indices.T)], rtol=1e-13)
    for j in range(4):
        np.testing.assert_allclose(
            np.einsum("sa,sa->s", ch.left[j], ch.right[j]), ch.entries, rtol=1e-12
        )
    res = cp.residual(X, S, ch)
    np.testing.assert_allclose(res.values, F[tuple(S.indices.T)] - S.values, rtol=1e-13)
    assert cp.objective(X, S) == pytest.approx(0.5 * np.sum(res.values**2))
    with pytest.raises(ValueError):
        cp.residual(random_tt(rng, (4, 3, 4), (1, 2, 2, 1)), S)


def _dense_frame_contraction(X, Z):
    # G_j[a, i, b] = sum over all multi-indices with i_j = i of
    # Z * (prefix product)[a] * (suffix product)[b], by explicit enumeration
    d = X.ndim
    out = [np.zeros(c.shape) for c in X.cores]
    for idx in np.ndindex(*X.dims):
        z = Z[idx]
        if z == 0:
            continue
        for j in range(d):
            pre = np.eye(1)
            for k in range(j):
                pre = pre @ X.cores[k][:, idx[k], :]
            suf = np.eye(1)
            for k in range(d - 1, j, -1):
                suf = X.cores[k][:, idx[k], :] @ suf
            out[j][:, idx[j], :] += z * np.outer(pre[0], suf[:, 0])
    return out


def test_frame_contraction_against_enumeration(rng):
    X = random_tt(rng, (3, 4, 3), (1, 2, 2, 1))
    T = rng.standard_normal((3, 4, 3))
    S = random_samples(rng, T, 17)
    Z = SparseResidual(S, rng.standard_normal(17))
    dense = np.zeros(X.dims)
    dense[tuple(S.indices.T)] = Z.values
    got = cp.frame_contraction(Z, X)
    for g, e in zip(got, _dense_frame_contraction(X, dense)):
        np.testing.assert_allclose(g, e, rtol=1e-12, atol=1e-13)


def test_frame_contraction_is_euclidean_gradient(rng):
    X = random_tt(rng, (4, 3, 4), (1, 2, 2, 1))
    T = rng.standard_normal((4, 3, 4))
    S = random_samples(rng, T, 30)
    G = cp.frame_contraction(cp.residual(X, S), X)
    h = 1e-6
    for j, pos in [(0, (0, 2, 1)), (1, (1, 0, 1)), (2, (0, 3, 0))]:
        cores_p = [np.array(c) for c in X.cores]
        cores_m = [np.array(c) for c in X.cores]
        cores_p[j][pos] += h
        cores_m[j][pos] -= h
        fd = (cp.objective(TTTensor(cores_p), S) - cp.objective(TTTensor(cores_m), S)) / (2 * h)
        assert G[j][pos] == pytest.approx(fd, rel=1e-7, abs=1e-9)


def test_tangent_apply_matches_dense(rng):
    X = random_tt(rng, (3, 4, 3), (1, 2, 2, 1))
    xi = [rng.standard_normal(c.shape) for c in X.cores]
    T = rng.standard_normal((3, 4, 3))
    S = random_samples(rng, T, 20)
    dense = np.zeros(X.dims)
    for j in range(3):
        cores = list(X.cores)
        cores[j] = xi[j]
        dense += naive_full(TTTensor(cores))
    np.testing.assert_allclose(cp.tangent_apply_on_samples(X, xi, S), dense[tuple(S.indices.T)], rtol=1e-12)
    with pytest.raises(ValueError):
        cp.tangent_apply_on_samples(X, [xi[0], xi[0], xi[2]], S)


def test_linearized_step_minimizes_quadratic(rng):
    X = random_tt(rng, (4, 4, 4), (1, 2, 2, 1))
    T = rng.standard_normal((4, 4, 4))
    S = random_samples(rng, T, 30)
    eta = [rng.standard_normal(c.shape) for c in X.cores]
    a = cp.tangent_apply_on_samples(X, eta, S)
    r = cp.residual(X, S).values

    def q(t):
        return float(np.sum((r + t * a) ** 2))

    # golden-section search as an independent minimizer of the 1-D quadratic
    lo, hi = -100.0, 100.0
    g = (np.sqrt(5) - 1) / 2
    for _ in range(200):
        c1, c2 = hi - g * (hi - lo), lo + g * (hi - lo)
        if q(c1) < q(c2):
            hi = c2
        else:
            lo = c1
    assert cp.linearized_step(X, eta, S) == pytest.approx(0.5 * (lo + hi), rel=1e-6)


def test_linearized_step_invisible_direction(rng):
    X = random_tt(rng, (3, 3), (1, 2, 1))
    S = SampleSet([[0, 0]], [1.0], (3, 3))
    eta = [np.zeros((1, 3, 2)), np.zeros((2, 3, 1))]
    eta[0][0, 1, 0] = 1.0  # only touches rows with i_1 = 1
    with pytest.raises(cp.InvisibleDirectionError):
        cp.linearized_step(X, eta, S)


def test_from_dense_and_dense_sample(rng):
    T = rng.standard_normal((3, 4))
    S = SampleSet.from_dense(T, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(S.values, [T[0, 1], T[2, 3]])
    np.testing.assert_array_equal(cp.dense_sample(T, S), S.values)
