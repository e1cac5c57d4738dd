"""Tensor-train algebra.

Conventions
-----------
A TT core is stored as a numpy array of shape ``(r_{k-1}, n_k, r_k)``.  All
matricizations follow the colexicographic (first index fastest) ordering,
which is numpy's ``order='F'`` reshape:

* ``left_unfold(core)[a + r0*i, b] == core[a, i, b]``
* ``right_unfold(core)[a, i + n*b] == core[a, i, b]``
* ``k_unfold(X, k)`` puts the first ``k`` modes on the rows, ``i_1`` fastest.

Dense tensors are plain ``numpy.ndarray`` objects indexed ``X[i1, ..., id]``.

Interface lists use 0-based core positions.  For a TT with ``d`` cores,
``left[j]`` is the product of cores ``0..j-1`` and ``right[j]`` the product of
cores ``j..d-1``, so that ``k_unfold(full, k) == left[k] @ right[k].T`` and the
neighbours of core ``j`` are ``left[j]`` and ``right[j + 1]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

__all__ = [
    "DENSE_BUDGET",
    "RANK_TOL",
    "BudgetExceededError",
    "RankDeficiencyError",
    "TTTensor",
    "GramCache",
    "SChain",
    "Interfaces",
    "left_unfold",
    "left_fold",
    "right_unfold",
    "right_fold",
    "k_unfold",
    "k_fold",
    "mode_product",
    "tt_full",
    "tt_entry",
    "interfaces",
    "gram_cache",
    "s_chain",
    "left_orthogonalize",
    "right_orthogonalize",
    "is_full_rank",
    "tt_svd",
    "tt_rounding",
    "tt_cond",
    "tt_norm",
    "tt_inner",
    "tt_distance",
    "manifold_dim",
    "check_feasible_ranks",
    "qr_pos",
    "cho_solve_spd",
    "unfolding_singular_values",
]

#: Maximum number of entries any dense materialization may allocate.
DENSE_BUDGET = 10**8

#: Relative singular-value threshold below which a matrix counts as rank deficient.
RANK_TOL = 1e-12


class BudgetExceededError(ValueError):
    """Raised when a dense object would exceed :data:`DENSE_BUDGET` entries."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Raised when a core or interface loses rank."""


def _check_budget(size: int) -> None:
    if size > DENSE_BUDGET:
        raise BudgetExceededError(
            f"dense object with {size} entries exceeds budget of {DENSE_BUDGET}"
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TTTensor:
    """A point of the total space: a chain of third-order cores.

    Parameters
    ----------
    cores : sequence of ndarray
        Core ``k`` has shape ``(r_{k-1}, n_k, r_k)`` with ``r_0 = r_d = 1``.
    left_orthogonal : bool
        Set when ``left_unfold(core)`` has orthonormal columns for every core
        but the last.  The flag is a promise made by the producer; it is not
        re-verified here.
    """

    cores: tuple
    left_orthogonal: bool = False

    def __post_init__(self):
        cores = tuple(_readonly(c) for c in self.cores)
        if len(cores) < 1:
            raise ValueError("a TT needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise ValueError(f"core {k} must be 3-dimensional, got shape {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise ValueError(
                    f"rank mismatch between core {k} {cores[k].shape} "
                    f"and core {k + 1} {cores[k + 1].shape}"
                )
        object.__setattr__(self, "cores", cores)

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    def __len__(self):
        return len(self.cores)

    def __getitem__(self, k):
        return self.cores[k]

    def __repr__(self):
        return f"TTTensor(dims={self.dims}, ranks={self.ranks})"

    def copy_with(self, cores, left_orthogonal=False) -> "TTTensor":
        return TTTensor(tuple(cores), left_orthogonal=left_orthogonal)


@dataclass(frozen=True)
class GramCache:
    """Interface Gram matrices.

    ``left[j]`` is ``X^{<=j}.T @ X^{<=j}`` (shape ``r_j x r_j``) for
    ``j = 0..d`` and ``right[j]`` is the Gram matrix of the product of cores
    ``j..d-1`` (shape ``r_j x r_j``), with ``left[0] = right[d] = [[1]]``.
    """

    left: tuple
    right: tuple


@dataclass(frozen=True)
class SChain:
    """Upper-triangular R-factors of the right interfaces.

    ``s[j]`` satisfies ``right_interface[j] = Q_j @ s[j]`` with orthonormal
    ``Q_j``; ``s[d] = [[1]]``.
    """

    s: tuple


@dataclass(frozen=True)
class Interfaces:
    left: tuple
    right: tuple = field(default=())


def left_unfold(core: np.ndarray) -> np.ndarray:
    r0, n, r1 = core.shape
    return np.reshape(core, (r0 * n, r1), order="F")


def left_fold(mat: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    r0, n, r1 = shape
    if mat.shape != (r0 * n, r1):
        raise ValueError(f"cannot fold {mat.shape} into left unfolding of {tuple(shape)}")
    return np.reshape(mat, (r0, n, r1), order="F")


def right_unfold(core: np.ndarray) -> np.ndarray:
    r0, n, r1 = core.shape
    return np.reshape(core, (r0, n * r1), order="F")


def right_fold(mat: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    r0, n, r1 = shape
    if mat.shape != (r0, n * r1):
        raise ValueError(f"cannot fold {mat.shape} into right unfolding of {tuple(shape)}")
    return np.reshape(mat, (r0, n, r1), order="F")


def k_unfold(X: np.ndarray, k: int) -> np.ndarray:
    """Matricize ``X`` with its first ``k`` modes as rows (``1 <= k <= d-1``)."""
    d = X.ndim
    if not 1 <= k <= d - 1:
        raise ValueError(f"k must lie in [1, {d - 1}], got {k}")
    rows = math.prod(X.shape[:k])
    return np.reshape(X, (rows, -1), order="F")


def k_fold(mat: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    if mat.size != math.prod(dims):
        raise ValueError("size mismatch")
    return np.reshape(mat, tuple(dims), order="F")


def mode_product(X: np.ndarray, axis: int, A: np.ndarray) -> np.ndarray:
    """Contract mode ``axis`` (0-based) of ``X`` with the columns of ``A``.

    ``(X x_k A)[..., j, ...] = sum_i X[..., i, ...] * A[j, i]``.
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] != X.shape[axis]:
        raise ValueError(
            f"matrix of shape {A.shape} does not match mode {axis} of size {X.shape[axis]}"
        )
    out = np.tensordot(A, X, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def qr_pos(A: np.ndarray, mode: str = "reduced"):
    """Householder QR with a nonnegative diagonal on ``R``."""
    Q, R = np.linalg.qr(A, mode=mode)
    k = min(R.shape)
    sgn = np.sign(np.diag(R)[:k])
    sgn[sgn == 0] = 1.0
    Q[:, :k] *= sgn
    R[:k] *= sgn[:, None]
    return Q, R


def _rank_deficient(R: np.ndarray) -> bool:
    sv = np.linalg.svd(R, compute_uv=False)
    return sv.size == 0 or not sv[0] > 0 or sv[-1] < RANK_TOL * sv[0]


def tt_full(X: TTTensor) -> np.ndarray:
    _check_budget(math.prod(X.dims))
    out = X.cores[0].reshape(X.dims[0], -1)
    for core in X.cores[1:]:
        out = np.tensordot(out, core, axes=([1], [0]))
        out = out.reshape(-1, core.shape[2])
    return out.reshape(X.dims)


def tt_entry(X: TTTensor, index: Sequence[int]) -> float:
    if len(index) != X.ndim:
        raise IndexError(f"index of length {len(index)} for a {X.ndim}-way tensor")
    vec = np.ones(1)
    for core, i in zip(X.cores, index):
        if not 0 <= i < core.shape[1]:
            raise IndexError(f"index {i} out of range for mode of size {core.shape[1]}")
        vec = vec @ core[:, i, :]
    return float(vec[0])


def interfaces(X: TTTensor, materialize: bool = True) -> Interfaces:
    """Materialize the left and right interface matrices.

    Rows are enumerated colexicographically, matching :func:`k_unfold`.
    """
    d = X.ndim
    if materialize:
        _check_budget(max(math.prod(X.dims) // min(X.dims), 1) * max(X.ranks))
    left = [np.ones((1, 1))]
    for core in X.cores:
        P = left[-1]
        nxt = np.einsum("pa,aib->pib", P, core)
        left.append(nxt.reshape(-1, core.shape[2], order="F"))
    right = [np.ones((1, 1))]
    for core in reversed(X.cores):
        Q = right[0]
        nxt = np.einsum("aib,qb->iqa", core, Q)
        right.insert(0, nxt.reshape(-1, core.shape[0], order="F"))
    return Interfaces(left=tuple(left), right=tuple(right))


def lmul(A: np.ndarray, core: np.ndarray) -> np.ndarray:
    """``core x_1 A``: contract the first rank index of ``core`` with ``A``."""
    r0, n, r1 = core.shape
    return (A @ core.reshape(r0, n * r1)).reshape(A.shape[0], n, r1)


def _sym(M):
    return 0.5 * (M + M.T)


def gram_cache(X: TTTensor) -> GramCache:
    """Interface Gram matrices by the forward/backward recursions, O(d n r^3)."""
    left = [np.ones((1, 1))]
    for core in X.cores:
        r1 = core.shape[2]
        T = lmul(left[-1], core)
        left.append(_sym(core.reshape(-1, r1).T @ T.reshape(-1, r1)))
    right = [np.ones((1, 1))]
    for core in reversed(X.cores):
        r0 = core.shape[0]
        U = core @ right[0]
        right.insert(0, _sym(U.reshape(r0, -1) @ core.reshape(r0, -1).T))
    return GramCache(left=tuple(left), right=tuple(right))


def s_chain(X: TTTensor, check: bool = True) -> SChain:
    """Backward QR sweep giving the R-factors of the right interfaces."""
    d = X.ndim
    s = [None] * (d + 1)
    s[d] = np.ones((1, 1))
    for j in range(d - 1, -1, -1):
        core = X.cores[j]
        M = right_unfold(np.einsum("aib,cb->aic", core, s[j + 1])).T
        _, R = qr_pos(M)
        if check and j > 0 and (R.shape[0] < R.shape[1] or _rank_deficient(R)):
            raise RankDeficiencyError(f"right interface {j} is rank deficient")
        s[j] = R
    return SChain(s=tuple(s))


def left_orthogonalize(X: TTTensor, check: bool = True) -> TTTensor:
    """Forward QR sweep; the result represents the same tensor."""
    cores = [np.array(c) for c in X.cores]
    for j in range(X.ndim - 1):
        shape = cores[j].shape
        Q, R = qr_pos(left_unfold(cores[j]))
        if check and (R.shape[0] < shape[2] or _rank_deficient(R)):
            raise RankDeficiencyError(f"core {j} is rank deficient")
        cores[j] = left_fold(Q, (shape[0], shape[1], Q.shape[1]))
        cores[j + 1] = np.einsum("ab,bic->aic", R, cores[j + 1])
    return TTTensor(tuple(cores), left_orthogonal=True)


def right_orthogonalize(X: TTTensor, check: bool = True) -> TTTensor:
    """Backward sweep making ``right_unfold(core)`` row-orthonormal for cores 1..d-1."""
    cores = [np.array(c) for c in X.cores]
    for j in range(X.ndim - 1, 0, -1):
        shape = cores[j].shape
        Q, R = qr_pos(right_unfold(cores[j]).T)
        if check and (R.shape[0] < shape[0] or _rank_deficient(R)):
            raise RankDeficiencyError(f"core {j} is rank deficient")
        cores[j] = right_fold(Q.T, (Q.shape[1], shape[1], shape[2]))
        cores[j - 1] = np.einsum("aib,cb->aic", cores[j - 1], R)
    return TTTensor(tuple(cores))


def is_full_rank(X: TTTensor) -> bool:
    """True when every core has full left and right unfolding rank."""
    for core in X.cores:
        r0, n, r1 = core.shape
        if not np.all(np.isfinite(core)):
            return False
        for M, r in ((left_unfold(core), r1), (right_unfold(core), r0)):
            if min(M.shape) < r:
                return False
            if r == 1:
                # rank one needs only a nonzero column or row
                if not np.any(M):
                    return False
                continue
            sv = scipy.linalg.svdvals(M, check_finite=False)
            if not sv[0] > 0 or sv[r - 1] < RANK_TOL * sv[0]:
                return False
    return True


def _normalize_ranks(max_ranks, d):
    if max_ranks is None:
        return [None] * (d + 1)
    if np.isscalar(max_ranks):
        return [1] + [int(max_ranks)] * (d - 1) + [1]
    max_ranks = list(max_ranks)
    if len(max_ranks) == d - 1:
        max_ranks = [1] + max_ranks + [1]
    if len(max_ranks) != d + 1:
        raise ValueError(f"rank vector must have length {d + 1}")
    return max_ranks


def _truncation_rank(s, cap, delta):
    r = s.size
    if delta > 0:
        tail = np.sqrt(np.cumsum(s[::-1] ** 2))[::-1]
        keep = np.nonzero(tail > delta)[0]
        r = int(keep[-1]) + 1 if keep.size else 1
    if cap is not None:
        r = min(r, int(cap))
    return max(r, 1)


def tt_svd(Z: np.ndarray, max_ranks=None, tol: float = 0.0) -> TTTensor:
    """TT-SVD of a dense tensor by sequential truncated SVDs.

    Parameters
    ----------
    Z : ndarray
        Dense tensor.
    max_ranks : int or sequence, optional
        Rank caps, either ``(r_0, ..., r_d)`` or the ``d-1`` inner ranks.
    tol : float
        Relative Frobenius accuracy; the budget is split evenly over the
        ``d-1`` truncations.

    Returns
    -------
    TTTensor
        Left-orthogonal except for the last core.
    """
    Z = np.asarray(Z, dtype=np.float64)
    _check_budget(Z.size)
    dims = Z.shape
    d = len(dims)
    caps = _normalize_ranks(max_ranks, d)
    for k in range(1, d):
        if caps[k] is not None:
            bound = min(math.prod(dims[:k]), math.prod(dims[k:]))
            if caps[k] > bound:
                raise ValueError(f"rank {caps[k]} exceeds size {bound} of unfolding {k}")
    delta = tol * np.linalg.norm(Z) / math.sqrt(max(d - 1, 1))
    cores = []
    r_prev = 1
    C = Z.reshape(dims[0], -1)
    for k in range(d - 1):
        C = C.reshape(r_prev * dims[k], -1)
        U, s, Vt = np.linalg.svd(C, full_matrices=False)
        r = _truncation_rank(s, caps[k + 1], delta)
        cores.append(U[:, :r].reshape(r_prev, dims[k], r))
        C = s[:r, None] * Vt[:r]
        r_prev = r
    cores.append(C.reshape(r_prev, dims[-1], 1))
    return TTTensor(tuple(cores), left_orthogonal=True)


def tt_rounding(X: TTTensor, target_ranks) -> TTTensor:
    """Recompress ``X`` to ``target_ranks`` without forming the dense tensor.

    Right-orthogonalizes, then sweeps left to right with truncated SVDs.  The
    output is left-orthogonal except for the last core.
    """
    d = X.ndim
    caps = _normalize_ranks(target_ranks, d)
    Y = right_orthogonalize(X, check=False)
    cores = [np.array(c) for c in Y.cores]
    for j in range(d - 1):
        shape = cores[j].shape
        U, s, Vt = np.linalg.svd(left_unfold(cores[j]), full_matrices=False)
        r = s.size if caps[j + 1] is None else int(caps[j + 1])
        if r > s.size:
            raise ValueError(
                f"target rank {r} at bond {j + 1} exceeds representable rank {s.size}"
            )
        cores[j] = left_fold(U[:, :r], (shape[0], shape[1], r))
        cores[j + 1] = np.einsum("ab,bic->aic", s[:r, None] * Vt[:r], cores[j + 1])
    return TTTensor(tuple(cores), left_orthogonal=True)


def _left_r_factors(X: TTTensor):
    F = [np.ones((1, 1))]
    for core in X.cores[:-1]:
        _, R = qr_pos(left_unfold(np.einsum("ab,bic->aic", F[-1], core)))
        F.append(R)
    return F


def unfolding_singular_values(X: TTTensor) -> list:
    """Singular values of every unfolding ``X^{<k>}``, ``k = 1..d-1``.

    Uses ``X^{<=k} = U F_k`` and ``X^{>=k+1} = V S_{k+1}``, so the nonzero
    singular values of the unfolding are those of ``F_k S_{k+1}^T``.
    """
    F = _left_r_factors(X)
    S = s_chain(X, check=False).s
    out = []
    for k in range(1, X.ndim):
        M = F[k] @ S[k].T
        out.append(np.linalg.svd(M, compute_uv=False))
    return out


def tt_cond(X: TTTensor) -> float:
    """``max sigma_max / min sigma_min`` over all unfoldings; ``inf`` if rank deficient."""
    svals = unfolding_singular_values(X)
    smax = max(s[0] for s in svals)
    smin = min(s[-1] for s in svals)
    if smax == 0 or smin <= RANK_TOL * smax:
        return math.inf
    return float(smax / smin)


def tt_inner(X: TTTensor, Y: TTTensor) -> float:
    if X.dims != Y.dims:
        raise ValueError("dimension mismatch")
    M = np.ones((1, 1))
    for a, b in zip(X.cores, Y.cores):
        M = a.reshape(-1, a.shape[2]).T @ lmul(M, b).reshape(-1, b.shape[2])
    return float(M[0, 0])


def _chain_norm(cores) -> float:
    R = np.ones((1, 1))
    for core in cores[:-1]:
        C = np.einsum("ab,bic->aic", R, core)
        _, R = np.linalg.qr(left_unfold(C))
    last = np.einsum("ab,bic->aic", R, cores[-1])
    return float(np.linalg.norm(last))


def tt_norm(X: TTTensor) -> float:
    """Frobenius norm via an orthogonalization sweep."""
    return _chain_norm(X.cores)


def tt_distance(X: TTTensor, Y: TTTensor) -> float:
    """``||X - Y||_F`` through a block representation of the difference.

    A QR sweep on the stacked cores avoids the cancellation of the Gram-based
    formula when ``X`` and ``Y`` are close.
    """
    if X.dims != Y.dims:
        raise ValueError("dimension mismatch")
    d = X.ndim
    if d == 1:
        return float(np.linalg.norm(X.cores[0] - Y.cores[0]))
    cores = []
    for j, (a, b) in enumerate(zip(X.cores, Y.cores)):
        if j == 0:
            cores.append(np.concatenate([a, b], axis=2))
        elif j == d - 1:
            cores.append(np.concatenate([a, -b], axis=0))
        else:
            r0a, n, r1a = a.shape
            r0b, _, r1b = b.shape
            c = np.zeros((r0a + r0b, n, r1a + r1b))
            c[:r0a, :, :r1a] = a
            c[r0a:, :, r1a:] = b
            cores.append(c)
    return _chain_norm(cores)


def manifold_dim(dims: Sequence[int], ranks: Sequence[int]) -> int:
    """``sum r_{k-1} n_k r_k - sum r_k^2`` for the fixed-rank manifold."""
    d = len(dims)
    total = sum(ranks[k] * dims[k] * ranks[k + 1] for k in range(d))
    return int(total - sum(ranks[k] ** 2 for k in range(1, d)))


def check_feasible_ranks(dims: Sequence[int], ranks: Sequence[int]) -> None:
    """Raise unless ``r_{k-1} <= n_k r_k`` and ``r_k <= n_k r_{k-1}`` hold."""
    d = len(dims)
    if len(ranks) != d + 1:
        raise ValueError(f"expected {d + 1} ranks, got {len(ranks)}")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise ValueError("boundary ranks must be 1")
    for k in range(d):
        if ranks[k] < 1 or ranks[k] > dims[k] * ranks[k + 1] or ranks[k + 1] > dims[k] * ranks[k]:
            raise ValueError(f"infeasible ranks {tuple(ranks)} for dims {tuple(dims)}")


def cho_solve_spd(A: np.ndarray, B: np.ndarray, side: str = "left") -> np.ndarray:
    """Solve with an SPD matrix, shifting the diagonal slightly if Cholesky fails.

    ``side='left'`` returns ``A^{-1} B``; ``side='right'`` returns ``B A^{-1}``.
    """
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
    except np.linalg.LinAlgError:
        shift = 1e-14 * max(np.trace(A) / A.shape[0], np.finfo(float).tiny)
        logger.debug("Tikhonov shift %.3e applied to %dx%d Gram", shift, *A.shape)
        c = scipy.linalg.cho_factor(A + shift * np.eye(A.shape[0]), check_finite=False)
    if side == "left":
        return scipy.linalg.cho_solve(c, B, check_finite=False)
    return scipy.linalg.cho_solve(c, B.T, check_finite=False).T
