"""Embedded geometry of the fixed-rank TT manifold.

Tangent vectors at a left-orthogonal base ``X`` are stored as core variations
``delta[k]`` with ``left_unfold(delta[k]).T @ left_unfold(X[k]) = 0`` for every
core but the last.  The orthonormal frame ``A`` maps the free parameters

* ``D[k]`` of shape ``(n_k r_{k-1} - r_k, r_k)`` for ``k < d-1``
* ``D[d-1]`` of the shape of the last core

to such variations: ``delta[k] = fold(Lperp_k @ D[k] @ S_{k+1}^{-T})`` where
``Lperp_k`` completes ``left_unfold(X[k])`` to an orthogonal basis and
``S_{k+1}`` is the R-factor of the right interface after core ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .completion import (
    SampleChains,
    SampleSet,
    SparseResidual,
    frame_contraction,
    sample_chains,
)
from .tensor import (
    GramCache,
    SChain,
    TTTensor,
    cho_solve_spd,
    gram_cache,
    interfaces,
    left_fold,
    left_orthogonalize,
    left_unfold,
    lmul,
    qr_pos,
    s_chain,
    tt_rounding,
)

__all__ = [
    "EmbeddedFrame",
    "EmbeddedTangent",
    "GNParameters",
    "build_frame",
    "frame_apply",
    "frame_adjoint",
    "frame_contractions",
    "tangent_project",
    "tangent_to_params",
    "tangent_to_tt",
    "tangent_full",
    "tangent_inner",
    "retract_ttsvd",
    "gn_to_core_direction",
    "sampled_frame_operator",
    "sampled_frame_matrix",
    "param_dim",
]


@dataclass(frozen=True)
class GNParameters:
    """Frame coordinates ``D[0], ..., D[d-1]`` of a tangent vector."""

    blocks: tuple

    def ravel(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks])

    def unravel(self, vec) -> "GNParameters":
        return GNParameters(_unravel(vec, [b.shape for b in self.blocks]))

    def dot(self, other) -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.blocks, other.blocks)))


def _unravel(vec, shapes):
    out, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(np.asarray(vec[pos : pos + size], dtype=np.float64).reshape(s))
        pos += size
    if pos != len(vec):
        raise ValueError("parameter vector has the wrong length")
    return tuple(out)


@dataclass(frozen=True, eq=False)
class EmbeddedFrame:
    """Everything the frame operators need at a left-orthogonal base."""

    base: TTTensor
    lperp: tuple
    chain: SChain
    cache: GramCache

    @property
    def param_shapes(self) -> list:
        X = self.base
        shapes = [(P.shape[1], X.cores[k].shape[2]) for k, P in enumerate(self.lperp)]
        shapes.append(X.cores[-1].shape)
        return shapes

    def zeros(self) -> GNParameters:
        return GNParameters(tuple(np.zeros(s) for s in self.param_shapes))

    def params_from_vector(self, vec) -> GNParameters:
        return GNParameters(_unravel(vec, self.param_shapes))


@dataclass(frozen=True, eq=False)
class EmbeddedTangent:
    """Tangent vector ``sum_k phi(X^1, ..., delta^k, ..., X^d)`` at ``base``."""

    base: TTTensor
    deltas: tuple

    def __add__(self, other):
        return EmbeddedTangent(self.base, tuple(a + b for a, b in zip(self.deltas, other.deltas)))

    def __sub__(self, other):
        return EmbeddedTangent(self.base, tuple(a - b for a, b in zip(self.deltas, other.deltas)))

    def __mul__(self, c):
        return EmbeddedTangent(self.base, tuple(c * a for a in self.deltas))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def param_dim(dims: Sequence[int], ranks: Sequence[int]) -> int:
    d = len(dims)
    return int(
        sum(ranks[k] * dims[k] * ranks[k + 1] for k in range(d))
        - sum(ranks[k] ** 2 for k in range(1, d))
    )


def build_frame(X: TTTensor) -> EmbeddedFrame:
    """Orthogonal complements and S-chain at ``X`` (orthogonalized if needed)."""
    if not X.left_orthogonal:
        X = left_orthogonalize(X)
    lperp = []
    for core in X.cores[:-1]:
        L = left_unfold(core)
        Q, _ = qr_pos(L, mode="complete")
        lperp.append(Q[:, L.shape[1] :])
    return EmbeddedFrame(base=X, lperp=tuple(lperp), chain=s_chain(X), cache=gram_cache(X))


def _frame(X) -> EmbeddedFrame:
    return X if isinstance(X, EmbeddedFrame) else build_frame(X)


def _times_s_inv_t(M, S):
    # M @ S^{-T}, S upper triangular
    return scipy.linalg.solve_triangular(S, M.T, lower=False, check_finite=False).T


def _times_s_inv(M, S):
    # M @ S^{-1}, S upper triangular
    return scipy.linalg.solve_triangular(S, M.T, lower=False, trans="T", check_finite=False).T


def frame_apply(X, params: GNParameters) -> EmbeddedTangent:
    """The orthonormal frame map from parameters to tangent vectors."""
    F = _frame(X)
    core_shapes = [c.shape for c in F.base.cores]
    d = len(core_shapes)
    deltas = []
    for k in range(d - 1):
        M = F.lperp[k] @ params.blocks[k]
        deltas.append(left_fold(_times_s_inv_t(M, F.chain.s[k + 1]), core_shapes[k]))
    deltas.append(np.array(params.blocks[-1], dtype=np.float64).reshape(core_shapes[-1]))
    return EmbeddedTangent(F.base, tuple(deltas))


def _tt_cross_contractions(X: TTTensor, Y: TTTensor) -> list:
    d = X.ndim
    P = [np.ones((1, 1))]
    for a, b in zip(X.cores, Y.cores):
        P.append(a.reshape(-1, a.shape[2]).T @ lmul(P[-1], b).reshape(-1, b.shape[2]))
    Q = [np.ones((1, 1))]
    for a, b in zip(reversed(X.cores), reversed(Y.cores)):
        Q.insert(0, (b @ Q[0]).reshape(b.shape[0], -1) @ a.reshape(a.shape[0], -1).T)
    return [
        lmul(P[j], Y.cores[j]) @ Q[j + 1] for j in range(d)
    ]


def frame_contractions(X: TTTensor, Z, chains: SampleChains | None = None) -> list:
    """``(I (x) X^{<=k-1})^T Z^{<k>} X^{>=k+1}`` for every core, as core-shaped arrays.

    ``Z`` may be a dense ``ndarray``, a :class:`SparseResidual`, a
    :class:`TTTensor` or an :class:`EmbeddedTangent`.
    """
    if isinstance(Z, SparseResidual):
        return frame_contraction(Z, X, chains)
    if isinstance(Z, EmbeddedTangent):
        Z = tangent_to_tt(Z)
    if isinstance(Z, TTTensor):
        if Z.dims != X.dims:
            raise ValueError("dimension mismatch")
        return _tt_cross_contractions(X, Z)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != X.dims:
        raise ValueError(f"dense tensor of shape {Z.shape} does not match dims {X.dims}")
    I = interfaces(X)
    out = []
    for k, core in enumerate(X.cores):
        lt, rt = I.left[k], I.right[k + 1]
        Zr = Z.reshape(lt.shape[0], core.shape[1], rt.shape[0], order="F")
        out.append(np.einsum("pa,piq,qb->aib", lt, Zr, rt, optimize=True))
    return out


def frame_adjoint(X, Z, chains: SampleChains | None = None) -> GNParameters:
    """Adjoint of :func:`frame_apply` with respect to the Frobenius inner product."""
    F = _frame(X)
    C = frame_contractions(F.base, Z, chains)
    d = len(C)
    blocks = []
    for k in range(d - 1):
        blocks.append(F.lperp[k].T @ _times_s_inv(left_unfold(C[k]), F.chain.s[k + 1]))
    blocks.append(C[-1])
    return GNParameters(tuple(blocks))


def tangent_project(X, Z, chains: SampleChains | None = None) -> EmbeddedTangent:
    """Orthogonal projection onto the tangent space at the left-orthogonal base.

    ``delta^k = fold((I - L L^T) L(C^k) R_{k+1}^{-1})`` for ``k < d-1`` and
    ``delta^d = C^d`` with ``C^k`` the frame contractions of ``Z``.
    """
    F = _frame(X)
    Xb = F.base
    C = frame_contractions(Xb, Z, chains)
    d = Xb.ndim
    deltas = []
    for k in range(d - 1):
        L = left_unfold(Xb.cores[k])
        M = left_unfold(C[k])
        M = M - L @ (L.T @ M)
        M = cho_solve_spd(F.cache.right[k + 1], M, side="right")
        deltas.append(left_fold(M, Xb.cores[k].shape))
    deltas.append(np.array(C[-1]))
    return EmbeddedTangent(Xb, tuple(deltas))


def tangent_to_params(F: EmbeddedFrame, xi: EmbeddedTangent) -> GNParameters:
    """Inverse of :func:`frame_apply` for gauge-conforming variations."""
    blocks = []
    for k, P in enumerate(F.lperp):
        blocks.append(P.T @ left_unfold(xi.deltas[k]) @ F.chain.s[k + 1].T)
    blocks.append(np.array(xi.deltas[-1]))
    return GNParameters(tuple(blocks))


def tangent_to_tt(xi: EmbeddedTangent, shift: float = 0.0) -> TTTensor:
    """Rank-``2r`` TT of ``shift * X + xi``."""
    X = xi.base
    d = X.ndim
    if d == 1:
        return TTTensor((shift * X.cores[0] + xi.deltas[0],))
    cores = []
    for k, (c, dc) in enumerate(zip(X.cores, xi.deltas)):
        r0, n, r1 = c.shape
        if k == 0:
            cores.append(np.concatenate([c, dc], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([shift * c + dc, c], axis=0))
        else:
            blk = np.zeros((2 * r0, n, 2 * r1))
            blk[:r0, :, :r1] = c
            blk[:r0, :, r1:] = dc
            blk[r0:, :, r1:] = c
            cores.append(blk)
    return TTTensor(tuple(cores))


def tangent_full(xi: EmbeddedTangent) -> np.ndarray:
    from .tensor import tt_full

    return tt_full(tangent_to_tt(xi))


def tangent_inner(xi: EmbeddedTangent, eta: EmbeddedTangent, cache: GramCache | None = None) -> float:
    """Frobenius inner product of two tangent vectors at the same base."""
    if cache is None:
        cache = gram_cache(xi.base)
    return float(
        sum(
            np.vdot(a, b @ cache.right[k + 1])
            for k, (a, b) in enumerate(zip(xi.deltas, eta.deltas))
        )
    )


def retract_ttsvd(X: TTTensor, xi: EmbeddedTangent) -> TTTensor:
    """Round ``X + xi`` back to the ranks of ``X``; the result is left-orthogonal."""
    return tt_rounding(tangent_to_tt(xi, shift=1.0), xi.base.ranks)


def gn_to_core_direction(X, params: GNParameters):
    """Core direction whose image under ``Dphi`` equals ``frame_apply(params)``."""
    from .quotient import CoreDirection

    return CoreDirection(frame_apply(X, params).deltas)


def _row_factors(F: EmbeddedFrame, S: SampleSet, chains: SampleChains):
    X = F.base
    facs = []
    for k in range(X.ndim - 1):
        r0, n, r1 = X.cores[k].shape
        Lp3 = F.lperp[k].reshape(r0, n, -1, order="F")
        v = _times_s_inv(chains.right[k + 1], F.chain.s[k + 1])
        facs.append((Lp3, v))
    return facs


def sampled_frame_operator(
    F: EmbeddedFrame, S: SampleSet, chains: SampleChains | None = None
) -> scipy.sparse.linalg.LinearOperator:
    """``p -> P_Omega(A(p))`` as a matrix-free linear operator.

    Rows follow the order of the samples, columns the C-order ravel of the
    parameter blocks.  Matvec and rmatvec cost ``O(d |Omega| r^2 + d n r^3)``
    plus the ``O(n^2 r^2)`` products with the complements.
    """
    X = F.base
    if chains is None:
        chains = sample_chains(X, S)
    shapes = F.param_shapes
    facs = _row_factors(F, S, chains)
    m = len(S)
    d = X.ndim
    ncols = int(sum(np.prod(s) for s in shapes))

    def matvec(p):
        blocks = _unravel(np.ravel(p), shapes)
        out = np.zeros(m)
        for k in range(d - 1):
            Lp3, v = facs[k]
            T = np.einsum("aip,pq->iaq", Lp3, blocks[k])[S.indices[:, k]]
            out += np.einsum("sa,saq,sq->s", chains.left[k], T, v)
        last = np.transpose(blocks[-1][:, :, 0])[S.indices[:, -1]]
        out += np.einsum("sa,sa->s", chains.left[d - 1], last)
        return out

    def rmatvec(z):
        z = np.ravel(z)
        out = []
        for k in range(d - 1):
            Lp3, v = facs[k]
            r0, n, _ = Lp3.shape
            W = (z[:, None] * chains.left[k])[:, :, None] * v[:, None, :]
            G = np.asarray(S.indicator(k) @ W.reshape(m, -1)).reshape(n, r0, -1)
            out.append(np.einsum("aip,iaq->pq", Lp3, G).ravel())
        r0, n, _ = shapes[-1]
        G = np.asarray(S.indicator(d - 1) @ (z[:, None] * chains.left[d - 1]))
        out.append(G.T.reshape(r0, n, 1).ravel())
        return np.concatenate(out)

    return scipy.sparse.linalg.LinearOperator(
        (m, ncols), matvec=matvec, rmatvec=rmatvec, dtype=np.float64
    )


def sampled_frame_matrix(
    F: EmbeddedFrame, S: SampleSet, chains: SampleChains | None = None
) -> np.ndarray:
    """Dense design matrix with one explicitly assembled row per sample."""
    X = F.base
    if chains is None:
        chains = sample_chains(X, S)
    facs = _row_factors(F, S, chains)
    d = X.ndim
    cols = []
    for k in range(d - 1):
        Lp3, v = facs[k]
        u = np.einsum("sa,sap->sp", chains.left[k], np.transpose(Lp3, (1, 0, 2))[S.indices[:, k]])
        cols.append(np.einsum("sp,sq->spq", u, v).reshape(len(S), -1))
    r0, n, _ = X.cores[-1].shape
    last = np.zeros((len(S), r0, n))
    last[np.arange(len(S)), :, S.indices[:, -1]] = chains.left[d - 1]
    cols.append(last.reshape(len(S), -1))
    return np.hstack(cols)
