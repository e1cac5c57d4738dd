"""Geometry of the quotient of TT core tuples by the gauge group.

Tangent vectors of the total space are tuples of core-shaped blocks
(:class:`CoreDirection`).  The metric weights block ``j`` by the Gram
matrices of its left and right interfaces, which makes the gradient a cheap
preconditioned version of the Euclidean one.  Vertical directions are the
infinitesimal gauge motions ``V(D)``; horizontal projection removes them by
solving a block-tridiagonal SPD system for ``D``.

Indexing is 0-based: ``D[j]`` (``j = 0..d-2``) is the gauge generator between
cores ``j`` and ``j + 1`` and has shape ``r_{j+1} x r_{j+1}``.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .completion import SampleChains, SampleSet, frame_contraction, residual, sample_chains
from .tensor import (
    RANK_TOL,
    GramCache,
    RankDeficiencyError,
    TTTensor,
    cho_solve_spd,
    is_full_rank,
    left_unfold,
    lmul,
    right_unfold,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CoreDirection",
    "GaugeElement",
    "HorizontalSystem",
    "HorizontalSolveError",
    "metric",
    "gauge_act",
    "gauge_act_dir",
    "vertical_vector",
    "vertical_gradient",
    "horizontal_operator",
    "assemble_horizontal_system",
    "solve_horizontal",
    "project_horizontal",
    "project_vertical",
    "horizontal_residual",
    "riemannian_gradient",
    "retract_total",
    "transport",
    "rbb_step",
    "RBB_MIN",
    "RBB_MAX",
]

RBB_MIN = 1e-8
RBB_MAX = 1e8


class HorizontalSolveError(np.linalg.LinAlgError):
    """The horizontal system could not be factorized."""


class CoreDirection:
    """A tuple of core-shaped blocks with vector-space arithmetic."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        self.blocks = tuple(np.asarray(b, dtype=np.float64) for b in blocks)

    @classmethod
    def zeros_like(cls, X) -> "CoreDirection":
        cores = X.cores if isinstance(X, TTTensor) else X.blocks
        return cls(np.zeros_like(c) for c in cores)

    @classmethod
    def from_tensor(cls, X: TTTensor) -> "CoreDirection":
        return cls(np.array(c) for c in X.cores)

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, k):
        return self.blocks[k]

    def __add__(self, other):
        return CoreDirection(a + b for a, b in zip(self.blocks, other.blocks))

    def __sub__(self, other):
        return CoreDirection(a - b for a, b in zip(self.blocks, other.blocks))

    def __neg__(self):
        return CoreDirection(-a for a in self.blocks)

    def __mul__(self, c):
        return CoreDirection(c * a for a in self.blocks)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return CoreDirection(a / c for a in self.blocks)

    def dot(self, other) -> float:
        """Euclidean inner product of the concatenated blocks."""
        return float(sum(np.vdot(a, b) for a, b in zip(self.blocks, other.blocks)))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def ravel(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks])

    def unravel(self, vec) -> "CoreDirection":
        out, pos = [], 0
        for b in self.blocks:
            out.append(np.asarray(vec[pos : pos + b.size]).reshape(b.shape))
            pos += b.size
        return CoreDirection(out)

    def __repr__(self):
        return f"CoreDirection(shapes={[b.shape for b in self.blocks]})"


def _blocks(xi):
    return xi.blocks if isinstance(xi, CoreDirection) else tuple(xi)


def _check_shapes(X: TTTensor, xi):
    blocks = _blocks(xi)
    if len(blocks) != X.ndim or any(b.shape != c.shape for b, c in zip(blocks, X.cores)):
        raise ValueError("direction shapes do not match the base point")
    return blocks


def _weight(block, L, R):
    # block x_1 L x_3 R for symmetric L, R
    return lmul(L, block) @ R


def metric(X: TTTensor, cache: GramCache, xi, eta) -> float:
    """Preconditioned metric ``sum_j <xi^j x_1 L_j x_3 R_{j+1}, eta^j>``."""
    a = _check_shapes(X, xi)
    b = _check_shapes(X, eta)
    total = 0.0
    for j in range(X.ndim):
        total += float(np.vdot(_weight(a[j], cache.left[j], cache.right[j + 1]), b[j]))
    return total


@dataclass(frozen=True)
class GaugeElement:
    """Invertible matrices ``A_1, ..., A_{d-1}`` acting on the bonds."""

    mats: tuple

    def __post_init__(self):
        mats = tuple(np.asarray(A, dtype=np.float64) for A in self.mats)
        for k, A in enumerate(mats):
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError(f"gauge matrix {k} must be square")
            sv = np.linalg.svd(A, compute_uv=False)
            if sv[-1] <= RANK_TOL * sv[0]:
                raise np.linalg.LinAlgError(f"gauge matrix {k} is singular")
        object.__setattr__(self, "mats", mats)

    def inverse(self) -> "GaugeElement":
        return GaugeElement(tuple(np.linalg.inv(A) for A in self.mats))

    @classmethod
    def random(cls, ranks, rng, scale: float = 0.3) -> "GaugeElement":
        """Well-conditioned ``I + scale * G`` with Gaussian ``G``."""
        return cls(
            tuple(
                np.eye(r) + scale * rng.standard_normal((r, r)) / np.sqrt(r) for r in ranks[1:-1]
            )
        )


def _gauge_blocks(blocks, A: GaugeElement):
    d = len(blocks)
    if len(A.mats) != d - 1:
        raise ValueError("gauge element does not match the number of cores")
    out = []
    for k, blk in enumerate(blocks):
        y = blk
        if k > 0:
            y = np.einsum("ab,bic->aic", np.linalg.inv(A.mats[k - 1]), y)
        if k < d - 1:
            y = y @ A.mats[k]
        out.append(y)
    return out


def gauge_act(X: TTTensor, A: GaugeElement) -> TTTensor:
    """``Y^k = X^k x_1 A_{k-1}^{-1} x_3 A_k^T``; represents the same tensor."""
    return TTTensor(tuple(_gauge_blocks(X.cores, A)))


def gauge_act_dir(xi, A: GaugeElement) -> CoreDirection:
    """Differential of the gauge action, which is the same linear map on blocks."""
    return CoreDirection(_gauge_blocks(_blocks(xi), A))


def vertical_vector(X: TTTensor, D: Sequence[np.ndarray]) -> CoreDirection:
    """Infinitesimal gauge motion ``{X^1 D_1, -D_1 X^2 + X^2 D_2, ..., -D_{d-1} X^d}``."""
    d = X.ndim
    if len(D) != d - 1:
        raise ValueError(f"expected {d - 1} gauge generators, got {len(D)}")
    out = []
    for j, core in enumerate(X.cores):
        blk = np.zeros_like(core)
        if j < d - 1:
            blk += core @ D[j]
        if j > 0:
            blk -= np.einsum("ab,bic->aic", D[j - 1], core)
        out.append(blk)
    return CoreDirection(out)


def vertical_gradient(X: TTTensor, cache: GramCache, xi) -> list:
    """``c_j = d/dD_j g(xi, V(D))``; all zero exactly when ``xi`` is horizontal."""
    blocks = _check_shapes(X, xi)
    d = X.ndim
    W = [_weight(blocks[j], cache.left[j], cache.right[j + 1]) for j in range(d)]
    out = []
    for j in range(d - 1):
        c = left_unfold(X.cores[j]).T @ left_unfold(W[j])
        c -= right_unfold(W[j + 1]) @ right_unfold(X.cores[j + 1]).T
        out.append(c)
    return out


def horizontal_operator(X: TTTensor, cache: GramCache, D: Sequence[np.ndarray]) -> list:
    """Matrix-free application of the horizontal system to ``D``.

    Equals ``0.5 * vertical_gradient(X, cache, vertical_vector(X, D))`` but is
    evaluated with small matrix products only.
    """
    d = X.ndim
    lg, rg = cache.left, cache.right
    out = []
    for j in range(d - 1):
        y = lg[j + 1] @ D[j] @ rg[j + 1]
        if j > 0:
            Xj = X.cores[j]
            T = np.einsum("ab,bic->aic", lg[j] @ D[j - 1], Xj)
            y -= 0.5 * (left_unfold(Xj).T @ left_unfold(T)) @ rg[j + 1]
        if j < d - 2:
            Xn = X.cores[j + 1]
            T = Xn @ (D[j + 1] @ rg[j + 2])
            y -= 0.5 * lg[j + 1] @ right_unfold(T) @ right_unfold(Xn).T
        out.append(y)
    return out


@dataclass(frozen=True)
class HorizontalSystem:
    """Block-tridiagonal system ``M vec(D) = b`` with Kronecker-form blocks.

    ``diag[j]`` multiplies ``vec(D_j)`` in row ``j``; ``upper[j]`` multiplies
    ``vec(D_{j+1})`` in row ``j`` and its transpose appears below the diagonal.
    """

    diag: tuple
    upper: tuple
    rhs: tuple

    def to_dense(self) -> np.ndarray:
        sizes = [A.shape[0] for A in self.diag]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        M = np.zeros((offs[-1], offs[-1]))
        for j, A in enumerate(self.diag):
            M[offs[j] : offs[j + 1], offs[j] : offs[j + 1]] = A
        for j, B in enumerate(self.upper):
            M[offs[j] : offs[j + 1], offs[j + 1] : offs[j + 2]] = B
            M[offs[j + 1] : offs[j + 2], offs[j] : offs[j + 1]] = B.T
        return M

    def dense_rhs(self) -> np.ndarray:
        if not self.rhs:
            return np.zeros(0)
        return np.concatenate(self.rhs)


def _vec(M):
    return np.reshape(M, -1, order="F")


def _horizontal_rhs(X: TTTensor, cache: GramCache, blocks) -> list:
    lg, rg = cache.left, cache.right
    rhs = []
    for j in range(X.ndim - 1):
        # (B (x) A) vec(M) = vec(A M B^T) applied to both Kronecker terms
        t1 = left_unfold(X.cores[j]).T @ left_unfold(lmul(lg[j], blocks[j])) @ rg[j + 1]
        t2 = lg[j + 1] @ right_unfold(blocks[j + 1] @ rg[j + 2]) @ right_unfold(X.cores[j + 1]).T
        rhs.append(0.5 * _vec(t1 - t2))
    return rhs


def assemble_horizontal_system(X: TTTensor, cache: GramCache, xi=None) -> HorizontalSystem:
    """Form the Kronecker blocks of the horizontal system explicitly.

    ``A_j = R_{j+1} (x) L_{j+1}``,
    ``B_j = -1/2 (R(X^{j+1}) (x) L_{j+1}) (R_{j+2} (x) L(X^{j+1}))`` and
    ``b_j = 1/2 [(R_{j+1} (x) L(X^j)^T) vec(xi^j x_1 L_j)
    - (R(X^{j+1}) (x) L_{j+1}) vec(xi^{j+1} x_3 R_{j+2})]``,
    with ``L_j, R_j`` the left and right interface Grams in 0-based indexing.
    """
    d = X.ndim
    lg, rg = cache.left, cache.right
    diag, upper, rhs = [], [], []
    blocks = _check_shapes(X, xi) if xi is not None else None
    for j in range(d - 1):
        diag.append(np.kron(rg[j + 1], lg[j + 1]))
        if j < d - 2:
            # entry (a + r b, c + r' e) is sum_i (L_{j+1} x_1 X^{j+1})[a, i, c] (X^{j+1} R_{j+2})[b, i, e]
            Xn = X.cores[j + 1]
            ra, n, rc = Xn.shape
            P = lmul(lg[j + 1], Xn).transpose(0, 2, 1).reshape(ra * rc, n)
            Q = (Xn @ rg[j + 2]).transpose(1, 0, 2).reshape(n, ra * rc)
            B = (P @ Q).reshape(ra, rc, ra, rc).transpose(0, 2, 1, 3)
            upper.append(-0.5 * B.reshape(ra * ra, rc * rc, order="F"))
        if blocks is None:
            rhs.append(np.zeros(diag[-1].shape[0]))
    if blocks is not None:
        rhs = _horizontal_rhs(X, cache, blocks)
    return HorizontalSystem(tuple(diag), tuple(upper), tuple(rhs))


def _block_tridiag_factor(sys: HorizontalSystem):
    """Block Cholesky factors ``(L_j, C_j)`` of the SPD block-tridiagonal matrix."""
    n = len(sys.diag)
    Ls, Cs = [], []
    for j in range(n):
        A = sys.diag[j]
        if j > 0:
            A = A - Cs[j - 1].T @ Cs[j - 1]
        try:
            L = scipy.linalg.cholesky(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            ev = np.linalg.eigvalsh(0.5 * (A + A.T))
            raise HorizontalSolveError(
                f"pivot block {j} not positive definite (eigenvalues in "
                f"[{ev[0]:.3e}, {ev[-1]:.3e}])"
            ) from exc
        Ls.append(L)
        if j < n - 1:
            Cs.append(scipy.linalg.solve_triangular(L, sys.upper[j], lower=True, check_finite=False))
    return Ls, Cs


def _block_tridiag_solve(factor, rhs) -> list:
    Ls, Cs = factor
    n = len(Ls)
    ys = []
    for j in range(n):
        b = rhs[j] if j == 0 else rhs[j] - Cs[j - 1].T @ ys[j - 1]
        ys.append(scipy.linalg.solve_triangular(Ls[j], b, lower=True, check_finite=False))
    xs = [None] * n
    for j in range(n - 1, -1, -1):
        r = ys[j] if j == n - 1 else ys[j] - Cs[j] @ xs[j + 1]
        xs[j] = scipy.linalg.solve_triangular(Ls[j].T, r, lower=False, check_finite=False)
    return xs


def _block_tridiag_cholesky(sys: HorizontalSystem) -> list:
    """Solve the SPD block-tridiagonal system by block Cholesky."""
    return _block_tridiag_solve(_block_tridiag_factor(sys), sys.rhs)


# one-slot memo: the gradient and the RBB projection factor the same matrix
_FACTOR_MEMO: list = [None, None, None]


def _cached_factor(X: TTTensor, cache: GramCache):
    ref, xref, fac = _FACTOR_MEMO
    if ref is not None and ref() is cache and xref() is X:
        return fac
    fac = _block_tridiag_factor(assemble_horizontal_system(X, cache))
    _FACTOR_MEMO[:] = [weakref.ref(cache), weakref.ref(X), fac]
    return fac


def solve_horizontal(
    X: TTTensor,
    cache: GramCache,
    xi,
    method: str = "cholesky",
    tol: float = 1e-12,
    maxiter: int | None = None,
) -> list:
    """Gauge generators ``D`` with ``xi - V(D)`` horizontal.

    Parameters
    ----------
    method : {'cholesky', 'cg'}
        ``'cholesky'`` assembles the Kronecker blocks and runs a block
        Cholesky; ``'cg'`` runs conjugate gradients on the matrix-free
        operator with relative tolerance ``tol`` and at most ``maxiter``
        (default ``50 d``) iterations.
    """
    d = X.ndim
    if d < 2:
        return []
    shapes = [(r, r) for r in X.ranks[1:-1]]
    if method == "cholesky":
        rhs = _horizontal_rhs(X, cache, _check_shapes(X, xi))
        xs = _block_tridiag_solve(_cached_factor(X, cache), rhs)
        return [np.reshape(x, s, order="F") for x, s in zip(xs, shapes)]
    if method == "cg":
        b = [0.5 * c for c in vertical_gradient(X, cache, xi)]
        sizes = [s[0] * s[1] for s in shapes]
        offs = np.concatenate([[0], np.cumsum(sizes)])

        def split(v):
            return [v[offs[j] : offs[j + 1]].reshape(shapes[j]) for j in range(d - 1)]

        def matvec(v):
            return np.concatenate([y.ravel() for y in horizontal_operator(X, cache, split(v))])

        op = scipy.sparse.linalg.LinearOperator((offs[-1], offs[-1]), matvec=matvec)
        rhs = np.concatenate([c.ravel() for c in b])
        if not np.any(rhs):
            return [np.zeros(s) for s in shapes]
        sol, info = scipy.sparse.linalg.cg(
            op, rhs, rtol=tol, atol=0.0, maxiter=maxiter or 50 * d
        )
        if info < 0:
            raise HorizontalSolveError(f"conjugate gradients broke down (info={info})")
        if info > 0:
            logger.info("horizontal CG hit the iteration cap (%d)", info)
        return split(sol)
    raise ValueError(f"unknown method {method!r}")


def project_vertical(X: TTTensor, cache: GramCache, xi, method: str = "cholesky") -> CoreDirection:
    return vertical_vector(X, solve_horizontal(X, cache, xi, method=method))


def project_horizontal(
    X: TTTensor, cache: GramCache, xi, method: str = "cholesky"
) -> CoreDirection:
    """Metric-orthogonal projection onto the horizontal space."""
    xi = CoreDirection(_check_shapes(X, xi))
    if X.ndim < 2:
        return xi
    return xi - project_vertical(X, cache, xi, method=method)


def horizontal_residual(X: TTTensor, cache: GramCache, xi) -> float:
    """Relative violation of the horizontal-space equations.

    Normalized by ``sqrt(g(xi, xi))`` times the Frobenius norms of the cores.
    """
    c = vertical_gradient(X, cache, xi)
    if not c:
        return 0.0
    num = np.sqrt(sum(np.sum(m**2) for m in c))
    scale = np.sqrt(max(metric(X, cache, xi, xi), 0.0)) * max(
        np.sqrt(sum(np.sum(core**2) for core in X.cores)), 1e-300
    )
    return float(num / scale) if scale > 0 else float(num)


def riemannian_gradient(
    X: TTTensor,
    cache: GramCache,
    S: SampleSet,
    chains: SampleChains | None = None,
) -> CoreDirection:
    """Gradient of ``1/2 ||P(phi(X)) - P(T)||^2`` under the preconditioned metric.

    ``grad^j = G^j x_1 L_j^{-1} x_3 R_{j+1}^{-1}`` where ``G^j`` is the sparse
    frame contraction of the residual.  Inverses are applied by Cholesky solves.
    """
    if chains is None:
        chains = sample_chains(X, S)
    Z = residual(X, S, chains)
    G = frame_contraction(Z, X, chains)
    out = []
    for j, g in enumerate(G):
        r0, n, r1 = g.shape
        y = cho_solve_spd(cache.left[j], right_unfold(g)).reshape((r0, n, r1), order="F")
        y = cho_solve_spd(cache.right[j + 1], left_unfold(y), side="right")
        out.append(y.reshape((r0, n, r1), order="F"))
    return CoreDirection(out)


def retract_total(X: TTTensor, xi, check: bool = True) -> TTTensor:
    """``X + xi`` core by core.

    Raises
    ------
    RankDeficiencyError
        If ``check`` is set and a resulting core loses rank.
    """
    blocks = _check_shapes(X, xi)
    Y = TTTensor(tuple(c + b for c, b in zip(X.cores, blocks)))
    if check and not (all(np.all(np.isfinite(c)) for c in Y.cores) and is_full_rank(Y)):
        raise RankDeficiencyError("retraction left the fixed-rank manifold")
    return Y


def transport(X_new: TTTensor, cache_new: GramCache, xi, method: str = "cholesky") -> CoreDirection:
    """Vector transport: horizontal projection at the new point."""
    return project_horizontal(X_new, cache_new, xi, method=method)


def rbb_step(
    s,
    y,
    inner: Callable[[object, object], float],
    alpha_prev: float,
) -> tuple:
    """Riemannian Barzilai-Borwein step ``g(s, s) / |g(s, y)|``.

    Returns
    -------
    alpha : float
    clamped : bool
        True when the value was clipped to ``[RBB_MIN, RBB_MAX]`` or the
        previous step was reused because ``|g(s, y)|`` underflowed.
    """
    ss = inner(s, s)
    sy = abs(inner(s, y))
    if sy < 1e-300 or not np.isfinite(ss) or not np.isfinite(sy):
        return float(alpha_prev), True
    alpha = ss / sy
    clipped = float(np.clip(alpha, RBB_MIN, RBB_MAX))
    return clipped, clipped != alpha
