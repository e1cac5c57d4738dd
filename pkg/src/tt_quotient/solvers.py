"""Optimization drivers for TT completion.

Quotient-geometry methods act on core tuples with the preconditioned metric;
the embedded baselines act on left-orthogonal representatives with the
Euclidean metric and TT-SVD retraction.  All drivers share one trace format
and one set of stopping rules.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .completion import (
    InvisibleDirectionError,
    SampleSet,
    SparseResidual,
    linearized_step,
    sample_chains,
)
from .embedded import (
    build_frame,
    frame_adjoint,
    frame_apply,
    gn_to_core_direction,
    retract_ttsvd,
    sampled_frame_matrix,
    sampled_frame_operator,
    tangent_inner,
    tangent_project,
)
from .quotient import (
    metric,
    project_horizontal,
    rbb_step,
    retract_total,
    riemannian_gradient,
)
from .tensor import (
    RankDeficiencyError,
    TTTensor,
    gram_cache,
    left_orthogonalize,
    tt_distance,
    tt_full,
    tt_norm,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "TraceRecord",
    "SolverTrace",
    "TRACE_HEADER",
    "stopping",
    "rgd_quotient",
    "rcg_quotient",
    "rgn",
    "first_order_embedded",
    "gn_solve",
    "solve",
    "SOLVERS",
]

TRACE_HEADER = ("iter", "objective", "grad_norm", "step", "beta", "rel_residual", "rel_error", "seconds")


@dataclass
class SolverConfig:
    """Parameters shared by all drivers.

    Attributes
    ----------
    max_iters : int
        Iteration cap.
    tol_grad : float
        Stop when the gradient norm falls below this value.
    tol_residual : float
        Stop when ``||P(X) - P(T)|| / ||P(T)||`` falls below this value.
    tol_rel_change : float or None
        Stop when the relative change of the residual norm between two
        iterations falls below this value.
    armijo_beta, armijo_sigma : float
        Backtracking contraction factor and sufficient-decrease constant.
    max_halvings : int
        Backtracking budget per iteration.
    rbb_min, rbb_max : float
        Clamp for the Barzilai-Borwein step.
    horizontal_method : {'cholesky', 'cg'}
        Solver for the horizontal projection system.
    gn_method : {'iterative', 'normal'}
        Least-squares solver for Gauss-Newton steps.
    gn_tol, gn_maxiter : float, int
        Tolerance and iteration cap of the iterative least-squares solver.
    gn_guard : bool
        Reject a Gauss-Newton step that increases the objective and retry
        with half the step once.
    seed : int
        Recorded for reproducibility; the drivers themselves are deterministic.
    """

    max_iters: int = 250
    tol_grad: float = 1e-12
    tol_residual: float = 1e-10
    tol_rel_change: float | None = None
    armijo_beta: float = 0.5
    armijo_sigma: float = 1e-4
    max_halvings: int = 25
    rbb_min: float = 1e-8
    rbb_max: float = 1e8
    horizontal_method: str = "cholesky"
    gn_method: str = "iterative"
    gn_tol: float = 1e-12
    gn_maxiter: int = 200
    gn_guard: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        for name in ("tol_grad", "tol_residual", "gn_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tol_rel_change is not None and not self.tol_rel_change > 0:
            raise ValueError("tol_rel_change must be positive")
        if not (0 < self.armijo_beta < 1 and 0 < self.armijo_sigma < 1):
            raise ValueError("Armijo parameters must lie in (0, 1)")
        if not 0 < self.rbb_min <= self.rbb_max:
            raise ValueError("invalid RBB clamp")
        if self.gn_method not in ("iterative", "normal"):
            raise ValueError(f"unknown gn_method {self.gn_method!r}")
        if self.horizontal_method not in ("cholesky", "cg"):
            raise ValueError(f"unknown horizontal_method {self.horizontal_method!r}")


@dataclass
class TraceRecord:
    """State at iterate ``iter`` and the step that produced it."""

    iter: int
    objective: float
    grad_norm: float
    step: float
    beta: float
    rel_residual: float
    rel_error: float
    seconds: float


@dataclass
class SolverTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    stop_reason: str | None = None
    events: list = field(default_factory=list)
    solver: str = ""

    def append(self, rec: TraceRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError("iteration index must increase")
        self.records.append(rec)

    def flag(self, it: int, what: str):
        self.events.append((it, what))

    def __len__(self):
        return len(self.records)

    @property
    def last(self) -> TraceRecord:
        return self.records[-1]

    @property
    def iterations(self) -> int:
        return self.records[-1].iter if self.records else 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([r.iter] + [repr(float(getattr(r, k))) for k in TRACE_HEADER[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "SolverTrace":
        if hasattr(source, "read"):
            text = source.read()
        elif isinstance(source, str) and "\n" in source:
            text = source
        else:
            with open(source) as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != TRACE_HEADER:
            raise ValueError("not a solver trace: header mismatch")
        tr = cls(status="loaded")
        for row in rows[1:]:
            tr.append(TraceRecord(int(row[0]), *(float(v) for v in row[1:])))
        return tr


def stopping(trace: SolverTrace, cfg: SolverConfig) -> str | None:
    """Name of the first criterion that fires on the latest record, else ``None``.

    Criteria are checked in the order residual, grad, max_iters, rel_change.
    """
    if not trace.records:
        return None
    rec = trace.records[-1]
    if rec.rel_residual < cfg.tol_residual:
        return "residual"
    if rec.grad_norm < cfg.tol_grad:
        return "grad"
    if rec.iter >= cfg.max_iters:
        return "max_iters"
    if cfg.tol_rel_change is not None and len(trace.records) >= 2:
        prev = trace.records[-2].rel_residual
        if prev > 0 and abs(rec.rel_residual - prev) / prev < cfg.tol_rel_change:
            return "rel_change"
    return None


class _Evaluator:
    """Residual bookkeeping on the sample set and against an optional truth."""

    def __init__(self, S: SampleSet, truth=None):
        self.S = S
        self.obs_norm = float(np.linalg.norm(S.values)) or 1.0
        self.truth = truth
        if truth is None:
            self.truth_norm = None
        elif isinstance(truth, TTTensor):
            self.truth_norm = tt_norm(truth)
        else:
            self.truth_norm = float(np.linalg.norm(truth))

    def at(self, X: TTTensor):
        chains = sample_chains(X, self.S)
        res = chains.entries - self.S.values
        return chains, res, 0.5 * float(res @ res)

    def rel_residual(self, res) -> float:
        return float(np.linalg.norm(res)) / self.obs_norm

    def rel_error(self, X: TTTensor) -> float:
        if self.truth is None:
            return math.nan
        if isinstance(self.truth, TTTensor):
            dist = tt_distance(X, self.truth)
        else:
            dist = float(np.linalg.norm(tt_full(X) - self.truth))
        return dist / (self.truth_norm or 1.0)


def _finish(trace: SolverTrace, reason: str | None, status: str = "ok"):
    trace.stop_reason = reason
    trace.status = status
    return trace


def _record(trace, ev, t, X, obj, gnorm, step, beta, res, t0, callback):
    rec = TraceRecord(
        iter=t,
        objective=obj,
        grad_norm=gnorm,
        step=step,
        beta=beta,
        rel_residual=ev.rel_residual(res),
        rel_error=ev.rel_error(X),
        seconds=time.perf_counter() - t0,
    )
    trace.append(rec)
    if callback is not None:
        callback(X, rec)
    return rec


def _armijo(ev, f0, slope, a0, try_point, cfg, trace, t):
    """Backtrack from ``a0`` until ``f0 - f(a) >= sigma * a * slope``."""
    a = a0
    for _ in range(cfg.max_halvings + 1):
        try:
            Y = try_point(a)
        except RankDeficiencyError:
            trace.flag(t, "rank_deficient_trial")
            a *= cfg.armijo_beta
            continue
        chains, res, f = ev.at(Y)
        if np.isfinite(f) and f0 - f >= cfg.armijo_sigma * a * slope:
            return a, Y, chains, res, f
        a *= cfg.armijo_beta
    return None


def _clamped_rbb(s, y, inner, alpha_prev, cfg, trace, t):
    a, clamped = rbb_step(s, y, inner, alpha_prev)
    a = float(np.clip(a, cfg.rbb_min, cfg.rbb_max))
    if clamped:
        trace.flag(t, "rbb_clamped")
    return a


def rgd_quotient(
    X0: TTTensor,
    S: SampleSet,
    cfg: SolverConfig | None = None,
    truth=None,
    callback: Callable | None = None,
):
    """Riemannian gradient descent with Armijo backtracking and RBB initial steps.

    Returns
    -------
    X : TTTensor
        Final iterate.
    trace : SolverTrace
    """
    cfg = cfg or SolverConfig()
    ev = _Evaluator(S, truth)
    trace = SolverTrace(solver="rgd_q")
    t0 = time.perf_counter()
    X = X0
    chains, res, f = ev.at(X)
    step, xi_prev, alpha_prev = math.nan, None, None
    t = 0
    hm = cfg.horizontal_method
    while True:
        cache = gram_cache(X)
        xi = -riemannian_gradient(X, cache, S, chains)
        g2 = max(metric(X, cache, xi, xi), 0.0)
        _record(trace, ev, t, X, f, math.sqrt(g2), step, math.nan, res, t0, callback)
        reason = stopping(trace, cfg)
        if reason:
            return X, _finish(trace, reason)
        if xi_prev is None:
            a0 = 1.0
        else:
            Pprev = project_horizontal(X, cache, xi_prev, method=hm)
            inner = lambda u, v: metric(X, cache, u, v)  # noqa: E731
            a0 = _clamped_rbb(alpha_prev * Pprev, xi - Pprev, inner, alpha_prev, cfg, trace, t)
        found = _armijo(ev, f, g2, a0, lambda a: retract_total(X, a * xi), cfg, trace, t)
        if found is None:
            trace.flag(t, "linesearch_failed")
            return X, _finish(trace, "linesearch_failed", status="linesearch_failed")
        step, X, chains, res, f = found
        xi_prev, alpha_prev = xi, step
        t += 1


def _safe_retract(X, direction, alpha, cfg, trace, t):
    for _ in range(cfg.max_halvings + 1):
        try:
            return alpha, retract_total(X, alpha * direction)
        except RankDeficiencyError:
            trace.flag(t, "rank_deficient_trial")
            alpha *= cfg.armijo_beta
    return None


def rcg_quotient(
    X0: TTTensor,
    S: SampleSet,
    cfg: SolverConfig | None = None,
    truth=None,
    callback: Callable | None = None,
):
    """Riemannian conjugate gradients with the modified Hestenes-Stiefel rule.

    The step size minimizes the residual of the first-order model along the
    search direction; there is no line search.
    """
    cfg = cfg or SolverConfig()
    ev = _Evaluator(S, truth)
    trace = SolverTrace(solver="rcg_q")
    t0 = time.perf_counter()
    X = X0
    chains, res, f = ev.at(X)
    step, beta = math.nan, math.nan
    grad_prev = eta_prev = None
    t = 0
    hm = cfg.horizontal_method
    while True:
        cache = gram_cache(X)
        grad = riemannian_gradient(X, cache, S, chains)
        xi = -grad
        g2 = max(metric(X, cache, grad, grad), 0.0)
        _record(trace, ev, t, X, f, math.sqrt(g2), step, beta, res, t0, callback)
        reason = stopping(trace, cfg)
        if reason:
            return X, _finish(trace, reason)
        beta = 0.0
        eta = xi
        if eta_prev is not None:
            Tg = project_horizontal(X, cache, grad_prev, method=hm)
            Teta = project_horizontal(X, cache, eta_prev, method=hm)
            diff = grad - Tg
            num = metric(X, cache, diff, grad)
            den = metric(X, cache, diff, Teta)
            if abs(den) < 1e-300:
                trace.flag(t, "restart")
            else:
                beta = max(0.0, num / den)
            if beta > 0:
                eta = xi + beta * Teta
                if metric(X, cache, eta, xi) <= 0:
                    trace.flag(t, "restart")
                    beta, eta = 0.0, xi
        try:
            alpha = linearized_step(X, eta.blocks, S, chains, res)
        except InvisibleDirectionError:
            trace.flag(t, "unit_step_fallback")
            alpha = 1.0
        got = _safe_retract(X, eta, alpha, cfg, trace, t)
        if got is None:
            return X, _finish(trace, "retraction_failed", status="retraction_failed")
        step, X = got
        chains, res, f = ev.at(X)
        grad_prev, eta_prev = grad, eta
        t += 1


def gn_solve(F, S: SampleSet, chains, res, cfg: SolverConfig, trace=None, t=0):
    """Gauss-Newton least squares ``min_p ||P_Omega(A(p)) + res||``.

    Returns
    -------
    params : GNParameters
    info : dict
        ``method``, ``iterations``, ``damped`` and the normal-equation
        residual ``||A^T (A p + res)||`` in ``normal_residual``.
    """
    info = {"method": cfg.gn_method, "damped": False, "iterations": 0}
    if cfg.gn_method == "normal":
        A = sampled_frame_matrix(F, S, chains)
        N = A.T @ A
        rhs = -(A.T @ res)
        try:
            p = scipy.linalg.cho_solve(scipy.linalg.cho_factor(N), rhs)
        except np.linalg.LinAlgError:
            lam = 1e-10 * float(np.sum(A * A))
            p = scipy.linalg.solve(N + lam * np.eye(N.shape[0]), rhs, assume_a="pos")
            info["damped"] = True
        info["normal_residual"] = float(np.linalg.norm(A.T @ (A @ p + res)))
    else:
        op = sampled_frame_operator(F, S, chains)
        out = scipy.sparse.linalg.lsqr(
            op, -res, atol=cfg.gn_tol, btol=cfg.gn_tol, iter_lim=cfg.gn_maxiter
        )
        p, istop, itn = out[0], out[1], out[2]
        info["iterations"] = int(itn)
        if istop not in (0, 1, 2, 4, 5):
            lam = 1e-10 * out[5] ** 2
            out = scipy.sparse.linalg.lsqr(
                op,
                -res,
                damp=math.sqrt(lam),
                atol=cfg.gn_tol,
                btol=cfg.gn_tol,
                iter_lim=cfg.gn_maxiter,
            )
            p = out[0]
            info["damped"] = True
            info["iterations"] += int(out[2])
        info["normal_residual"] = float(np.linalg.norm(op.rmatvec(op.matvec(p) + res)))
    if info["damped"] and trace is not None:
        trace.flag(t, "gn_damped")
    return F.params_from_vector(p), info


def rgn(
    X0: TTTensor,
    S: SampleSet,
    cfg: SolverConfig | None = None,
    geometry: str = "quotient",
    truth=None,
    callback: Callable | None = None,
):
    """Riemannian Gauss-Newton with unit steps.

    Each iteration left-orthogonalizes the iterate, solves the sampled
    least-squares problem in the orthonormal frame and retracts either on the
    total space (``geometry='quotient'``, after horizontal projection of the
    core direction) or by TT-SVD (``geometry='embedded'``).  ``grad_norm`` in
    the trace is the Frobenius norm of the embedded Riemannian gradient.
    """
    if geometry not in ("quotient", "embedded"):
        raise ValueError(f"unknown geometry {geometry!r}")
    cfg = cfg or SolverConfig()
    ev = _Evaluator(S, truth)
    trace = SolverTrace(solver="rgn_q" if geometry == "quotient" else "rgn_e")
    t0 = time.perf_counter()
    X = X0
    step = math.nan
    t = 0
    while True:
        X = left_orthogonalize(X) if not X.left_orthogonal else X
        F = build_frame(X)
        chains, res, f = ev.at(X)
        gnorm = float(np.linalg.norm(frame_adjoint(F, SparseResidual(S, res), chains).ravel()))
        _record(trace, ev, t, X, f, gnorm, step, math.nan, res, t0, callback)
        reason = stopping(trace, cfg)
        if reason:
            return X, _finish(trace, reason)
        params, _ = gn_solve(F, S, chains, res, cfg, trace, t)

        def candidate(scale):
            p = type(params)(tuple(scale * b for b in params.blocks))
            if geometry == "embedded":
                return retract_ttsvd(X, frame_apply(F, p))
            h = project_horizontal(X, F.cache, gn_to_core_direction(F, p), method=cfg.horizontal_method)
            return retract_total(X, h)

        scale = 1.0
        try:
            Y = candidate(scale)
        except RankDeficiencyError:
            trace.flag(t, "rank_deficient_trial")
            scale = 0.5
            Y = None
            for _ in range(cfg.max_halvings):
                try:
                    Y = candidate(scale)
                    break
                except RankDeficiencyError:
                    scale *= 0.5
            if Y is None:
                return X, _finish(trace, "retraction_failed", status="retraction_failed")
        if cfg.gn_guard:
            _, _, fY = ev.at(Y)
            if not fY <= f:
                trace.flag(t, "gn_guard")
                scale *= 0.5
                Y = candidate(scale)
        step = scale
        X = Y
        t += 1


def first_order_embedded(
    X0: TTTensor,
    S: SampleSet,
    cfg: SolverConfig | None = None,
    variant: str = "rgd",
    truth=None,
    callback: Callable | None = None,
):
    """Embedded-geometry baselines.

    ``variant='rgd'`` uses Armijo backtracking from a Barzilai-Borwein initial
    step; ``variant='rcg'`` uses the modified Hestenes-Stiefel rule with the
    linearized step.  The gradient is the tangent projection of the sparse
    residual, the retraction is TT-SVD rounding and vector transport is
    tangent projection at the new point.
    """
    if variant not in ("rgd", "rcg"):
        raise ValueError(f"unknown variant {variant!r}")

    cfg = cfg or SolverConfig()
    ev = _Evaluator(S, truth)
    trace = SolverTrace(solver=f"{variant}_e")
    t0 = time.perf_counter()
    X = left_orthogonalize(X0) if not X0.left_orthogonal else X0
    chains, res, f = ev.at(X)
    step, beta = math.nan, math.nan
    prev_dir = prev_grad = None
    alpha_prev = None
    t = 0

    def transport(F, v):
        return tangent_project(F, v)

    while True:
        F = build_frame(X)
        cache = F.cache
        grad = tangent_project(F, SparseResidual(S, res), chains)
        g2 = max(tangent_inner(grad, grad, cache), 0.0)
        inner = lambda u, v: tangent_inner(u, v, cache)  # noqa: E731
        _record(trace, ev, t, X, f, math.sqrt(g2), step, beta, res, t0, callback)
        reason = stopping(trace, cfg)
        if reason:
            return X, _finish(trace, reason)
        xi = -grad
        if variant == "rgd":
            if prev_dir is None:
                a0 = 1.0
            else:
                Tprev = transport(F, prev_dir)
                a0 = _clamped_rbb(alpha_prev * Tprev, xi - Tprev, inner, alpha_prev, cfg, trace, t)
            found = _armijo(
                ev, f, g2, a0, lambda a: retract_ttsvd(X, a * xi), cfg, trace, t
            )
            if found is None:
                trace.flag(t, "linesearch_failed")
                return X, _finish(trace, "linesearch_failed", status="linesearch_failed")
            step, X, chains, res, f = found
            prev_dir, alpha_prev = xi, step
        else:
            beta = 0.0
            eta = xi
            if prev_dir is not None:
                Tg = transport(F, prev_grad)
                Teta = transport(F, prev_dir)
                diff = grad - Tg
                den = inner(diff, Teta)
                if abs(den) < 1e-300:
                    trace.flag(t, "restart")
                else:
                    beta = max(0.0, inner(diff, grad) / den)
                if beta > 0:
                    eta = xi + beta * Teta
                    if inner(eta, xi) <= 0:
                        trace.flag(t, "restart")
                        beta, eta = 0.0, xi
            try:
                alpha = linearized_step(F.base, eta.deltas, S, chains, res)
            except InvisibleDirectionError:
                trace.flag(t, "unit_step_fallback")
                alpha = 1.0
            step = alpha
            X = retract_ttsvd(F.base, alpha * eta)
            chains, res, f = ev.at(X)
            prev_grad, prev_dir = grad, eta
        t += 1


def _rgd_e(X0, S, cfg=None, truth=None, callback=None):
    return first_order_embedded(X0, S, cfg, "rgd", truth, callback)


def _rcg_e(X0, S, cfg=None, truth=None, callback=None):
    return first_order_embedded(X0, S, cfg, "rcg", truth, callback)


def _rgn_q(X0, S, cfg=None, truth=None, callback=None):
    return rgn(X0, S, cfg, "quotient", truth, callback)


def _rgn_e(X0, S, cfg=None, truth=None, callback=None):
    return rgn(X0, S, cfg, "embedded", truth, callback)


SOLVERS = {
    "rgd_q": rgd_quotient,
    "rcg_q": rcg_quotient,
    "rgn_q": _rgn_q,
    "rgn_e": _rgn_e,
    "rgd_e": _rgd_e,
    "rcg_e": _rcg_e,
}


def solve(name: str, X0: TTTensor, S: SampleSet, cfg: SolverConfig | None = None, truth=None, callback=None):
    """Dispatch to a driver by its short name (see :data:`SOLVERS`)."""
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return fn(X0, S, cfg, truth=truth, callback=callback)
