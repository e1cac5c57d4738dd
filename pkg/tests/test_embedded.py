import numpy as np
import pytest

from conftest import naive_full, random_samples, random_tt
from tt_quotient import embedded as em
from tt_quotient.completion import SparseResidual, dense_sample
from tt_quotient.quotient import project_horizontal
from tt_quotient.tensor import TTTensor, gram_cache, tt_full, tt_svd

DIMS = (4, 3, 5, 3)
RANKS = (1, 2, 3, 2, 1)


def _jacobian(X):
    """Dense Jacobian of the core-to-tensor map, one column per core entry."""
    cols = []
    for j, core in enumerate(X.cores):
        for pos in np.ndindex(*core.shape):
            E = np.zeros(core.shape)
            E[pos] = 1.0
            cores = list(X.cores)
            cores[j] = E
            cols.append(naive_full(TTTensor(cores)).ravel())
    return np.array(cols).T


@pytest.fixture
def frame(rng):
    return em.build_frame(random_tt(rng, DIMS, RANKS))


def _params(rng, F):
    return F.params_from_vector(rng.standard_normal(em.param_dim(DIMS, RANKS)))


def test_param_dim_equals_jacobian_rank(rng, frame):
    J = _jacobian(frame.base)
    s = np.linalg.svd(J, compute_uv=False)
    assert int(np.sum(s > 1e-10 * s[0])) == em.param_dim(DIMS, RANKS) == 45
    assert sum(int(np.prod(sh)) for sh in frame.param_shapes) == 45


def test_frame_is_orthonormal(rng, frame):
    p = _params(rng, frame)
    xi = em.frame_apply(frame, p)
    np.testing.assert_allclose(em.frame_adjoint(frame, em.tangent_full(xi)).ravel(), p.ravel(), atol=1e-12)
    np.testing.assert_allclose(em.frame_adjoint(frame, xi).ravel(), p.ravel(), atol=1e-12)
    assert np.linalg.norm(em.tangent_full(xi)) == pytest.approx(np.linalg.norm(p.ravel()), rel=1e-12)
    np.testing.assert_allclose(em.tangent_to_params(frame, xi).ravel(), p.ravel(), atol=1e-12)


def test_tangent_vector_matches_dense_sum(rng, frame):
    xi = em.frame_apply(frame, _params(rng, frame))
    dense = 0.0
    for k in range(len(DIMS)):
        cores = list(frame.base.cores)
        cores[k] = xi.deltas[k]
        dense = dense + naive_full(TTTensor(cores))
    np.testing.assert_allclose(em.tangent_full(xi), dense, atol=1e-12)


def test_projection_against_dense_jacobian(rng, frame):
    J = _jacobian(frame.base)
    U, s, _ = np.linalg.svd(J, full_matrices=False)
    U = U[:, s > 1e-10 * s[0]]
    Z = rng.standard_normal(DIMS)
    expect = (U @ (U.T @ Z.ravel())).reshape(DIMS)
    got = em.tangent_full(em.tangent_project(frame, Z))
    np.testing.assert_allclose(got, expect, atol=1e-11)
    via_frame = em.tangent_full(em.frame_apply(frame, em.frame_adjoint(frame, Z)))
    np.testing.assert_allclose(via_frame, expect, atol=1e-11)


def test_contraction_inputs_agree(rng, frame):
    Y = random_tt(rng, DIMS, (1, 2, 2, 2, 1))
    a = em.frame_contractions(frame.base, Y)
    b = em.frame_contractions(frame.base, tt_full(Y))
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-11)
    T = rng.standard_normal(DIMS)
    S = random_samples(rng, T, 30)
    Zs = SparseResidual(S, S.values)
    dense = np.zeros(DIMS)
    dense[tuple(S.indices.T)] = S.values
    for x, y in zip(em.frame_contractions(frame.base, Zs), em.frame_contractions(frame.base, dense)):
        np.testing.assert_allclose(x, y, atol=1e-12)
    with pytest.raises(ValueError):
        em.frame_contractions(frame.base, np.zeros((2, 2)))


def test_base_point_projection(frame):
    # X itself is tangent: only the last block survives
    p = em.frame_adjoint(frame, tt_full(frame.base))
    for b in p.blocks[:-1]:
        assert np.abs(b).max() < 1e-12
    np.testing.assert_allclose(p.blocks[-1], frame.base.cores[-1], atol=1e-12)


def test_tangent_inner(rng, frame):
    xi = em.frame_apply(frame, _params(rng, frame))
    eta = em.frame_apply(frame, _params(rng, frame))
    assert em.tangent_inner(xi, eta) == pytest.approx(
        np.vdot(em.tangent_full(xi), em.tangent_full(eta)), rel=1e-11
    )


def test_retraction_matches_dense_tt_svd(rng, frame):
    xi = em.frame_apply(frame, _params(rng, frame)) * 0.1
    Y = em.retract_ttsvd(frame.base, xi)
    assert Y.left_orthogonal and Y.ranks == RANKS
    dense = tt_svd(tt_full(frame.base) + em.tangent_full(xi), RANKS)
    np.testing.assert_allclose(tt_full(Y), tt_full(dense), atol=1e-11)


def test_sampled_operator_against_explicit_rows(rng, frame):
    T = rng.standard_normal(DIMS)
    S = random_samples(rng, T, 60)
    op = em.sampled_frame_operator(frame, S)
    A = em.sampled_frame_matrix(frame, S)
    v = rng.standard_normal(A.shape[1])
    z = rng.standard_normal(60)
    np.testing.assert_allclose(op.matvec(v), A @ v, atol=1e-12)
    np.testing.assert_allclose(op.rmatvec(z), A.T @ z, atol=1e-12)
    p = _params(rng, frame)
    np.testing.assert_allclose(A @ p.ravel(), dense_sample(em.tangent_full(em.frame_apply(frame, p)), S), atol=1e-12)


def test_core_direction_lift_has_same_image(rng, frame):
    p = _params(rng, frame)
    X = frame.base
    h = project_horizontal(X, gram_cache(X), em.gn_to_core_direction(frame, p))
    dense = 0.0
    for k in range(len(DIMS)):
        cores = list(X.cores)
        cores[k] = h[k]
        dense = dense + naive_full(TTTensor(cores))
    np.testing.assert_allclose(dense, em.tangent_full(em.frame_apply(frame, p)), atol=1e-11)


def test_build_frame_orthogonalizes(rng):
    X = random_tt(rng, (3, 4, 3), (1, 2, 2, 1))
    F = em.build_frame(X)
    assert F.base.left_orthogonal
    np.testing.assert_allclose(tt_full(F.base), tt_full(X), atol=1e-12)
    for P, c in zip(F.lperp, F.base.cores[:-1]):
        L = c.reshape(-1, c.shape[2], order="F")
        np.testing.assert_allclose(P.T @ L, 0, atol=1e-13)
        np.testing.assert_allclose(P.T @ P, np.eye(P.shape[1]), atol=1e-13)
