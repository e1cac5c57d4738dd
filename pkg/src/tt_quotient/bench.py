"""Instance generators and experiment drivers.

Every trial draws from its own generator ``numpy.random.default_rng((seed, trial))``
so results do not depend on trial order.
"""

from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .completion import SampleSet, sample_chains
from .embedded import param_dim
from .solvers import TRACE_HEADER, SolverConfig, SolverTrace, solve
from .tensor import (
    DENSE_BUDGET,
    BudgetExceededError,
    TTTensor,
    check_feasible_ranks,
    qr_pos,
    tt_cond,
    tt_distance,
    tt_norm,
    tt_svd,
)

logger = logging.getLogger(__name__)

__all__ = [
    "gen_random_tt",
    "gen_fixed_kappa",
    "gen_function_tensor",
    "function_tensor_entries",
    "sample_omega",
    "oversampled_count",
    "observe",
    "initial_point",
    "ExperimentSpec",
    "TrialResult",
    "RecoveryResult",
    "recovery_experiment",
    "convergence_experiment",
    "rank_increase_schedule",
    "pad_ranks",
    "interpolation_experiment",
    "InterpolationResult",
    "emit_report",
    "trial_rng",
]


def trial_rng(seed: int, trial: int = 0) -> np.random.Generator:
    return np.random.default_rng((int(seed), int(trial)))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_random_tt(dims: Sequence[int], ranks: Sequence[int], seed=0) -> TTTensor:
    """TT with independent standard normal cores."""
    check_feasible_ranks(dims, ranks)
    rng = _rng(seed)
    return TTTensor(
        tuple(rng.standard_normal((ranks[k], dims[k], ranks[k + 1])) for k in range(len(dims)))
    )


def _orthonormal(rng, rows, cols):
    Q, _ = qr_pos(rng.standard_normal((rows, cols)))
    return Q


def gen_fixed_kappa(dims: Sequence[int], r: int, kappa: float, seed=0, check: bool = True) -> TTTensor:
    """Three-way TT whose condition number equals ``kappa``.

    The first core is orthonormal, the middle core is a diagonal Tucker core
    with orthonormal factors and the last core has singular values spaced
    linearly from 1 to ``1/kappa``.  The unfolding singular values are then
    ``Sigma`` for the second unfolding and lie in ``[1/kappa, 1]`` for the first.
    """
    if len(dims) != 3:
        raise ValueError("the fixed-condition construction needs d = 3")
    if kappa < 1:
        raise ValueError("kappa must be at least 1")
    n1, n2, n3 = dims
    check_feasible_ranks(dims, (1, r, r, 1))
    rng = _rng(seed)
    T1 = _orthonormal(rng, n1, r).reshape(1, n1, r)
    U = _orthonormal(rng, r, r)
    V = _orthonormal(rng, n2, r)
    W = _orthonormal(rng, r, r)
    T2 = np.einsum("ap,ip,cp->aic", U, V, W)
    X = _orthonormal(rng, r, r)
    Y = _orthonormal(rng, n3, r)
    sigma = np.linspace(1.0, 1.0 / kappa, r)
    T3 = ((X * sigma) @ Y.T).reshape(r, n3, 1)
    T = TTTensor((T1, T2, T3))
    if check:
        got = tt_cond(T)
        if abs(got - kappa) > 1e-6 * kappa:
            raise RuntimeError(f"generated condition number {got} differs from {kappa}")
    return T


def function_tensor_entries(kind: str, indices, dims) -> np.ndarray:
    """Entries of a function tensor at 0-based multi-indices.

    ``exp_sqrt``: ``exp(-sqrt(sum (i_k / (n_k - 1))^2))`` with ``i_k`` counted from 0.
    ``inv_norm``: ``1 / sqrt(sum j_k^2)`` with ``j_k = i_k + 1`` counted from 1.
    """
    idx = np.asarray(indices, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.float64)
    if kind == "exp_sqrt":
        scale = np.where(dims > 1, dims - 1, 1.0)
        return np.exp(-np.sqrt(np.sum((idx / scale) ** 2, axis=-1)))
    if kind == "inv_norm":
        return 1.0 / np.sqrt(np.sum((idx + 1.0) ** 2, axis=-1))
    raise ValueError(f"unknown function tensor {kind!r}")


def gen_function_tensor(kind: str, dims: Sequence[int]) -> np.ndarray:
    size = math.prod(dims)
    if size > DENSE_BUDGET:
        raise BudgetExceededError(f"{size} entries exceed the dense budget")
    grids = np.indices(dims).reshape(len(dims), -1).T
    return function_tensor_entries(kind, grids, dims).reshape(dims)


def sample_omega(dims: Sequence[int], count: int, seed=0, exclude=None) -> np.ndarray:
    """Uniform sample of ``count`` distinct 0-based multi-indices.

    Parameters
    ----------
    exclude : array_like of int, shape (k, d), optional
        Indices that must not be drawn.
    """
    total = math.prod(dims)
    banned = np.zeros(0, dtype=np.int64)
    if exclude is not None and len(exclude):
        banned = np.unique(np.ravel_multi_index(np.asarray(exclude).T, dims))
    if count < 0 or count > total - banned.size:
        raise ValueError(f"cannot draw {count} distinct entries from {total - banned.size}")
    rng = _rng(seed)
    if banned.size == 0:
        lin = rng.choice(total, size=count, replace=False)
    else:
        picked = np.zeros(0, dtype=np.int64)
        while picked.size < count:
            need = count - picked.size
            cand = rng.choice(total, size=min(total, 2 * need + 16), replace=False)
            cand = cand[~np.isin(cand, banned) & ~np.isin(cand, picked)]
            picked = np.concatenate([picked, cand[:need]])
        lin = picked
    return np.array(np.unravel_index(lin, dims), dtype=np.int64).T


def oversampled_count(dims: Sequence[int], ranks: Sequence[int], os_ratio: float) -> int:
    count = int(round(os_ratio * param_dim(dims, ranks)))
    if count > math.prod(dims):
        raise ValueError("oversampling ratio asks for more entries than the tensor has")
    return count


def observe(T, indices) -> SampleSet:
    """Sample set holding the entries of ``T`` (TT or dense) at ``indices``."""
    if isinstance(T, TTTensor):
        S = SampleSet(indices, np.zeros(len(indices)), T.dims)
        return S.with_values(sample_chains(T, S).entries)
    return SampleSet.from_dense(np.asarray(T), indices)


def initial_point(S: SampleSet, ranks: Sequence[int], method: str = "spectral", seed=0) -> TTTensor:
    """Starting point for completion.

    ``spectral``: TT-SVD of the zero-filled observations scaled by
    ``prod(n) / |Omega|``.  ``random``: Gaussian cores rescaled so that the
    norm of the tensor matches the same energy estimate.
    """
    dims = S.dims
    scale = math.prod(dims) / len(S)
    if method == "spectral":
        Z = np.zeros(dims)
        Z[tuple(S.indices.T)] = S.values
        return tt_svd(scale * Z, max_ranks=ranks)
    if method == "random":
        X = gen_random_tt(dims, ranks, seed)
        target = math.sqrt(scale) * float(np.linalg.norm(S.values))
        c = (target / tt_norm(X)) ** (1.0 / len(dims))
        return TTTensor(tuple(c * core for core in X.cores))
    raise ValueError(f"unknown initialization {method!r}")


@dataclass
class ExperimentSpec:
    """Parameters of a recovery or convergence experiment."""

    generator: str = "random"
    dims: tuple = (50, 50, 50)
    ranks: tuple = (1, 5, 5, 1)
    os_ratio: float = 8.0
    kappa: float = 1.0
    trials: int = 20
    solvers: tuple = ("rgd_q", "rcg_q", "rgd_e", "rcg_e")
    seed: int = 0
    success_threshold: float = 1e-3
    max_iters: int = 250
    tol_residual: float = 1e-4
    init: str = "spectral"
    output: str | None = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.ranks = tuple(int(r) for r in self.ranks)
        self.solvers = tuple(self.solvers)
        if self.kappa < 1:
            raise ValueError("kappa must be at least 1")
        check_feasible_ranks(self.dims, self.ranks)
        oversampled_count(self.dims, self.ranks, self.os_ratio)

    def make_truth(self, rng) -> TTTensor:
        if self.generator == "random":
            return gen_random_tt(self.dims, self.ranks, rng)
        if self.generator == "fixed_kappa":
            if len(set(self.ranks[1:-1])) != 1:
                raise ValueError("fixed_kappa needs equal inner ranks")
            return gen_fixed_kappa(self.dims, self.ranks[1], self.kappa, rng)
        raise ValueError(f"generator {self.generator!r} does not produce TT ground truth")

    def config(self) -> SolverConfig:
        return SolverConfig(
            max_iters=self.max_iters, tol_residual=self.tol_residual, seed=self.seed
        )


@dataclass
class TrialResult:
    trial: int
    solver: str
    success: bool
    rel_error: float
    rel_residual: float
    iterations: int
    seconds: float
    status: str
    trace: SolverTrace | None = None
    error: str | None = None


@dataclass
class RecoveryResult:
    spec: ExperimentSpec
    trials: list = field(default_factory=list)

    def rate(self, solver: str) -> float:
        rows = [t for t in self.trials if t.solver == solver]
        return sum(t.success for t in rows) / len(rows) if rows else math.nan

    def rates(self) -> dict:
        return {s: self.rate(s) for s in self.spec.solvers}

    @property
    def failed(self) -> list:
        return [t for t in self.trials if t.error is not None]


def _make_instance(spec: ExperimentSpec, trial: int):
    rng = trial_rng(spec.seed, trial)
    T = spec.make_truth(rng)
    count = oversampled_count(spec.dims, spec.ranks, spec.os_ratio)
    idx = sample_omega(spec.dims, count, rng)
    S = observe(T, idx)
    X0 = initial_point(S, spec.ranks, spec.init, rng)
    return T, S, X0


def _run(spec, trial, name, T, S, X0, cfg, keep_trace):
    t0 = time.perf_counter()
    try:
        X, tr = solve(name, X0, S, cfg, truth=T)
        err = tt_distance(X, T) / tt_norm(T)
        return TrialResult(
            trial=trial,
            solver=name,
            success=bool(err <= spec.success_threshold),
            rel_error=err,
            rel_residual=tr.last.rel_residual,
            iterations=tr.iterations,
            seconds=time.perf_counter() - t0,
            status=tr.status,
            trace=tr if keep_trace else None,
        )
    except Exception as exc:  # a failing trial must not abort the experiment
        logger.error("trial %d solver %s failed: %s", trial, name, exc)
        return TrialResult(
            trial=trial,
            solver=name,
            success=False,
            rel_error=math.nan,
            rel_residual=math.nan,
            iterations=0,
            seconds=time.perf_counter() - t0,
            status="error",
            error="".join(traceback.format_exception_only(type(exc), exc)).strip(),
        )


def _trial_job(spec: ExperimentSpec, trial: int, keep_traces: bool) -> list:
    cfg = spec.config()
    T, S, X0 = _make_instance(spec, trial)
    return [_run(spec, trial, name, T, S, X0, cfg, keep_traces) for name in spec.solvers]


def recovery_experiment(
    spec: ExperimentSpec, keep_traces: bool = False, progress=None, workers: int = 1
) -> RecoveryResult:
    """Success rates of each solver over random trials.

    Every solver sees the same instance and starting point within a trial.
    With ``workers > 1`` trials run in a process pool; results are collected
    in trial order, so the output does not depend on scheduling.
    """
    out = RecoveryResult(spec)
    if workers > 1 and spec.trials > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            jobs = [pool.submit(_trial_job, spec, t, keep_traces) for t in range(spec.trials)]
            batches = [job.result() for job in jobs]
    else:
        batches = (_trial_job(spec, t, keep_traces) for t in range(spec.trials))
    for batch in batches:
        for res in batch:
            out.trials.append(res)
            if progress is not None:
                progress(res)
    return out


def convergence_experiment(spec: ExperimentSpec, progress=None, workers: int = 1) -> RecoveryResult:
    """Full traces to a tight residual tolerance; same layout as recovery results."""
    return recovery_experiment(spec, keep_traces=True, progress=progress, workers=workers)


def rank_increase_schedule(max_ranks: Sequence[int]) -> list:
    """Rank vectors from all ones to ``max_ranks``, one increment at a time.

    Bonds are visited left to right in repeated sweeps; a bond at its cap is
    skipped.
    """
    cur = [1] * len(max_ranks)
    out = [tuple(cur)]
    d = len(max_ranks) - 1
    while any(cur[k] < max_ranks[k] for k in range(1, d)):
        for k in range(1, d):
            if cur[k] < max_ranks[k]:
                cur[k] += 1
                out.append(tuple(cur))
    return out


def pad_ranks(X: TTTensor, ranks: Sequence[int], rng, magnitude: float = 1e-3) -> TTTensor:
    """Grow the bond dimensions of ``X`` to ``ranks``.

    New slices are Gaussian with standard deviation ``magnitude * ||core||``.
    """
    cores = [np.array(c) for c in X.cores]
    for k in range(len(cores)):
        r0, n, r1 = cores[k].shape
        R0, R1 = ranks[k], ranks[k + 1]
        if (R0, R1) == (r0, r1):
            continue
        if R0 < r0 or R1 < r1:
            raise ValueError("ranks can only grow")
        scale = magnitude * float(np.linalg.norm(cores[k]))
        new = scale * rng.standard_normal((R0, n, R1))
        new[:r0, :, :r1] = cores[k]
        cores[k] = new
    return TTTensor(tuple(cores))


@dataclass
class InterpolationResult:
    kind: str
    solver: str
    fraction: float
    test_error: float
    train_residual: float
    iterations: int
    seconds: float
    stages: list = field(default_factory=list)


def interpolation_experiment(
    kind: str = "exp_sqrt",
    dims: Sequence[int] = (20, 20, 20, 20),
    max_ranks: Sequence[int] = (1, 5, 5, 5, 1),
    fraction: float = 0.1,
    solvers: Sequence[str] = ("rgd_q", "rcg_q"),
    seed: int = 0,
    test_size: int = 100,
    stage_iters: int = 15,
    final_iters: int = 20,
    tol_residual: float = 1e-5,
    tol_rel_change: float = 1e-3,
    pad_magnitude: float = 1e-3,
) -> list:
    """Completion of a function tensor with a rank-increase schedule.

    Returns one :class:`InterpolationResult` per solver with the relative error
    on a held-out set disjoint from the training samples.
    """
    dims = tuple(dims)
    count = int(round(fraction * math.prod(dims)))
    rng = trial_rng(seed, 0)
    idx = sample_omega(dims, count, rng)
    S = SampleSet(idx, function_tensor_entries(kind, idx, dims), dims)
    test_idx = sample_omega(dims, test_size, trial_rng(seed, 1), exclude=idx)
    test_vals = function_tensor_entries(kind, test_idx, dims)
    test = SampleSet(test_idx, test_vals, dims)
    schedule = rank_increase_schedule(max_ranks)
    results = []
    for name in solvers:
        prng = trial_rng(seed, 2)
        t0 = time.perf_counter()
        X = initial_point(S, schedule[0], "spectral")
        total = 0
        stages = []
        last_res = math.nan
        for s, ranks in enumerate(schedule):
            if s > 0:
                X = pad_ranks(X, ranks, prng, pad_magnitude)
            final = s == len(schedule) - 1
            cfg = SolverConfig(
                max_iters=final_iters if final else stage_iters,
                tol_residual=tol_residual,
                tol_rel_change=tol_rel_change,
                seed=seed,
            )
            X, tr = solve(name, X, S, cfg)
            total += tr.iterations
            last_res = tr.last.rel_residual
            stages.append((ranks, tr.iterations, tr.stop_reason, last_res))
        pred = sample_chains(X, test).entries
        err = float(np.linalg.norm(pred - test_vals) / np.linalg.norm(test_vals))
        results.append(
            InterpolationResult(
                kind=kind,
                solver=name,
                fraction=fraction,
                test_error=err,
                train_residual=last_res,
                iterations=total,
                seconds=time.perf_counter() - t0,
                stages=stages,
            )
        )
    return results


RECOVERY_HEADER = ("solver", "generator", "os_ratio", "kappa", "trials", "successes", "rate")
TRIAL_HEADER = ("trial", "solver", "success", "rel_error", "rel_residual", "iterations", "seconds", "status", "error")
INTERP_HEADER = ("kind", "solver", "fraction", "test_error", "train_residual", "iterations", "seconds")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def emit_report(results, outdir) -> list:
    """Write CSV tables and per-run traces; returns the paths written.

    ``results`` is a :class:`RecoveryResult`, a list of
    :class:`InterpolationResult`, or an empty list.
    """
    os.makedirs(outdir, exist_ok=True)
    written = []
    if isinstance(results, RecoveryResult):
        spec = results.spec
        rows = []
        for name in spec.solvers:
            sel = [t for t in results.trials if t.solver == name]
            succ = sum(t.success for t in sel)
            rows.append(
                (name, spec.generator, spec.os_ratio, spec.kappa, len(sel), succ,
                 repr(succ / len(sel)) if sel else "nan")
            )
        p = os.path.join(outdir, "recovery.csv")
        _write_csv(p, RECOVERY_HEADER, rows)
        written.append(p)
        p = os.path.join(outdir, "trials.csv")
        _write_csv(
            p,
            TRIAL_HEADER,
            [
                (t.trial, t.solver, int(t.success), repr(t.rel_error), repr(t.rel_residual),
                 t.iterations, repr(t.seconds), t.status, t.error or "")
                for t in results.trials
            ],
        )
        written.append(p)
        tdir = os.path.join(outdir, "traces")
        for t in results.trials:
            if t.trace is not None:
                os.makedirs(tdir, exist_ok=True)
                p = os.path.join(tdir, f"{t.solver}_trial{t.trial:03d}.csv")
                t.trace.to_csv(p)
                written.append(p)
        return written
    results = list(results)
    if results and not all(isinstance(r, InterpolationResult) for r in results):
        raise TypeError("unsupported result type")
    p = os.path.join(outdir, "interpolation.csv")
    _write_csv(
        p,
        INTERP_HEADER,
        [
            (r.kind, r.solver, r.fraction, repr(r.test_error), repr(r.train_residual),
             r.iterations, repr(r.seconds))
            for r in results
        ],
    )
    written.append(p)
    if not results:
        p = os.path.join(outdir, "recovery.csv")
        _write_csv(p, RECOVERY_HEADER, [])
        written.append(p)
        p = os.path.join(outdir, "trace.csv")
        _write_csv(p, TRACE_HEADER, [])
        written.append(p)
    return written
