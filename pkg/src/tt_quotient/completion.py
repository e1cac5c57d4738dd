"""Entrywise sampling, the completion objective and sparse contractions.

Every routine here costs ``O(d |Omega| r^2)``: per-sample prefix and suffix
products of core slices are computed once and shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse

from .tensor import TTTensor

__all__ = [
    "SampleSet",
    "SparseResidual",
    "SampleChains",
    "InvisibleDirectionError",
    "sample_chains",
    "residual",
    "objective",
    "frame_contraction",
    "tangent_apply_on_samples",
    "linearized_step",
    "dense_sample",
]


class InvisibleDirectionError(ZeroDivisionError):
    """The search direction vanishes on every observed entry."""


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Observed entries of a ``d``-way tensor.

    Parameters
    ----------
    indices : array_like of int, shape (m, d)
        0-based multi-indices, pairwise distinct.
    values : array_like, shape (m,)
        Observed values.
    dims : sequence of int
        Ambient dimensions.
    """

    indices: np.ndarray
    values: np.ndarray
    dims: tuple
    _indicators: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        dims = tuple(int(n) for n in self.dims)
        if idx.ndim != 2 or idx.shape[1] != len(dims):
            raise ValueError(f"indices must have shape (m, {len(dims)})")
        if idx.shape[0] < 1:
            raise ValueError("a sample set needs at least one entry")
        if vals.shape[0] != idx.shape[0]:
            raise ValueError("indices and values differ in length")
        if np.any(idx < 0) or np.any(idx >= np.array(dims)):
            raise ValueError("index out of range")
        lin = np.ravel_multi_index(idx.T, dims)
        if np.unique(lin).size != lin.size:
            raise ValueError("duplicate indices")
        idx.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dims", dims)

    def __len__(self):
        return self.indices.shape[0]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def indicator(self, k: int) -> scipy.sparse.csr_matrix:
        """Sparse ``n_k x m`` matrix with a one at ``(i_k^s, s)``."""
        E = self._indicators.get(k)
        if E is None:
            m = len(self)
            E = scipy.sparse.csr_matrix(
                (np.ones(m), (self.indices[:, k], np.arange(m))),
                shape=(self.dims[k], m),
            )
            self._indicators[k] = E
        return E

    def with_values(self, values) -> "SampleSet":
        """Same index set, new values; reuses the cached indicators."""
        out = SampleSet(self.indices, values, self.dims)
        out._indicators.update(self._indicators)
        return out

    @classmethod
    def from_dense(cls, T: np.ndarray, indices) -> "SampleSet":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(idx, T[tuple(idx.T)], T.shape)


@dataclass(frozen=True, eq=False)
class SparseResidual:
    """Residual ``P_Omega(phi(X)) - P_Omega(T)`` stored on the sample indices."""

    samples: SampleSet
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != len(self.samples):
            raise ValueError("residual length does not match the sample set")
        object.__setattr__(self, "values", v)

    @property
    def dims(self):
        return self.samples.dims

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class SampleChains:
    """Per-sample partial products.

    ``left[j]`` has shape ``(m, r_j)`` and holds ``X^1(i_1)...X^j(i_j)``
    (product of cores ``0..j-1``); ``right[j]`` has shape ``(m, r_j)`` and holds
    the product of cores ``j..d-1``.  ``left[d][:, 0]`` are the sampled entries.
    """

    left: tuple
    right: tuple

    @property
    def entries(self) -> np.ndarray:
        return self.left[-1][:, 0]


def _check_dims(X: TTTensor, S: SampleSet):
    if tuple(X.dims) != tuple(S.dims):
        raise ValueError(f"tensor dims {X.dims} do not match sample dims {S.dims}")


def _slices(core: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # (m, r0, r1) stack of core[:, i_s, :]
    return np.transpose(core, (1, 0, 2))[idx]


def sample_chains(X: TTTensor, S: SampleSet) -> SampleChains:
    _check_dims(X, S)
    m = len(S)
    d = X.ndim
    slices = [_slices(X.cores[j], S.indices[:, j]) for j in range(d)]
    left = [np.ones((m, 1))]
    for j in range(d):
        left.append(np.matmul(left[-1][:, None, :], slices[j])[:, 0, :])
    right = [np.ones((m, 1))]
    for j in range(d - 1, -1, -1):
        right.insert(0, np.matmul(slices[j], right[0][:, :, None])[:, :, 0])
    return SampleChains(left=tuple(left), right=tuple(right))


def residual(X: TTTensor, S: SampleSet, chains: SampleChains | None = None) -> SparseResidual:
    """``tt_entry(X, idx) - value`` for every sample."""
    if chains is None:
        chains = sample_chains(X, S)
    return SparseResidual(S, chains.entries - S.values)


def objective(X: TTTensor, S: SampleSet, chains: SampleChains | None = None) -> float:
    r = residual(X, S, chains).values
    return 0.5 * float(r @ r)


def frame_contraction(
    Z: SparseResidual, X: TTTensor, chains: SampleChains | None = None
) -> list:
    """Contract a sparse tensor against the frame of every core.

    Returns
    -------
    list of ndarray
        Core-shaped arrays ``G[j]`` of shape ``(r_{j-1}, n_j, r_j)`` with
        ``left_unfold(G[j]) = (I (x) X^{<=j-1})^T Z^{<j>} X^{>=j+1}``.
    """
    S = Z.samples
    if chains is None:
        chains = sample_chains(X, S)
    z = Z.values
    out = []
    for j, core in enumerate(X.cores):
        r0, n, r1 = core.shape
        W = (z[:, None] * chains.left[j])[:, :, None] * chains.right[j + 1][:, None, :]
        acc = S.indicator(j) @ W.reshape(len(S), r0 * r1)
        out.append(np.asarray(acc).reshape(n, r0, r1).transpose(1, 0, 2).copy())
    return out


def tangent_apply_on_samples(
    X: TTTensor, xi: Sequence[np.ndarray], S: SampleSet, chains: SampleChains | None = None
) -> np.ndarray:
    """``sum_k phi(X^1, ..., xi^k, ..., X^d)`` evaluated on the samples."""
    if chains is None:
        chains = sample_chains(X, S)
    out = np.zeros(len(S))
    for j, blk in enumerate(xi):
        if blk.shape != X.cores[j].shape:
            raise ValueError(f"block {j} has shape {blk.shape}, expected {X.cores[j].shape}")
        sl = _slices(blk, S.indices[:, j])
        out += np.einsum("sa,sab,sb->s", chains.left[j], sl, chains.right[j + 1])
    return out


def linearized_step(
    X: TTTensor,
    eta: Sequence[np.ndarray],
    S: SampleSet,
    chains: SampleChains | None = None,
    res: np.ndarray | None = None,
) -> float:
    """Minimizer of ``||P(phi(X)) + a P(Dphi[eta]) - P(T)||^2`` over ``a``.

    Raises
    ------
    InvisibleDirectionError
        If ``P_Omega(Dphi[eta])`` is identically zero.
    """
    if chains is None:
        chains = sample_chains(X, S)
    if res is None:
        res = chains.entries - S.values
    a = tangent_apply_on_samples(X, eta, S, chains)
    den = float(a @ a)
    if den == 0.0:
        raise InvisibleDirectionError("direction vanishes on the sample set")
    return float(-(a @ res) / den)


def dense_sample(T: np.ndarray, S: SampleSet) -> np.ndarray:
    """Gather entries of a dense tensor at the sample indices."""
    return T[tuple(S.indices.T)]
