"""Command line entry point ``ttq``.

Subcommands::

    ttq recover      success rates over random trials
    ttq converge     full residual traces to a tight tolerance
    ttq interpolate  function-tensor completion with rank increase
    ttq complete     one-shot completion of a sample file

The number of parallel trial workers defaults to the ``TTQ_THREADS``
environment variable (1 when unset); ``--workers`` overrides it.
Exit status is 0 on success, 1 if any trial raised, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import bench, io
from .solvers import SOLVERS, SolverConfig, solve

logger = logging.getLogger("tt_quotient")

THREADS_ENV = "TTQ_THREADS"


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _solver_list(text: str) -> tuple:
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [n for n in names if n not in SOLVERS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown solver(s) {bad}; choose from {sorted(SOLVERS)}")
    return names


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1
    return max(val, 1)


def _ranks_for(dims, ranks):
    # a single integer means equal inner ranks
    if len(ranks) == 1:
        return (1,) + ranks * (len(dims) - 1) + (1,)
    return ranks


def _add_experiment_args(p, tol, max_iters, trials):
    p.add_argument("--generator", choices=("random", "fixed_kappa"), default="random")
    p.add_argument("--dims", type=_int_list, default=(50, 50, 50))
    p.add_argument("--ranks", type=_int_list, default=(5,),
                   help="boundary-inclusive ranks, or one inner rank")
    p.add_argument("--os", dest="os_ratio", type=float, default=8.0, help="oversampling ratio")
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--solvers", type=_solver_list, default=("rgd_q", "rcg_q", "rgd_e", "rcg_e"))
    p.add_argument("--trials", type=int, default=trials)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("spectral", "random"), default="spectral")
    p.add_argument("--max-iters", type=int, default=max_iters)
    p.add_argument("--tol-residual", type=float, default=tol)
    p.add_argument("--threshold", type=float, default=1e-3, help="success threshold on relative error")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory for CSV files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttq", description="Riemannian TT completion experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recover", help="success rates over random trials")
    _add_experiment_args(p, tol=1e-4, max_iters=250, trials=20)
    p = sub.add_parser("converge", help="residual traces to a tight tolerance")
    _add_experiment_args(p, tol=1e-10, max_iters=250, trials=1)

    p = sub.add_parser("interpolate", help="function-tensor completion with rank increase")
    p.add_argument("--kind", choices=("exp_sqrt", "inv_norm"), default="exp_sqrt")
    p.add_argument("--dims", type=_int_list, default=(20, 20, 20, 20))
    p.add_argument("--max-ranks", type=_int_list, default=(5,))
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--solvers", type=_solver_list, default=("rgd_q", "rcg_q"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-size", type=int, default=100)
    p.add_argument("--out", default=None)

    p = sub.add_parser("complete", help="complete a sample file")
    p.add_argument("samples", help="sample file (text format)")
    p.add_argument("--ranks", type=_int_list, required=True)
    p.add_argument("--solver", choices=sorted(SOLVERS), default="rgd_q")
    p.add_argument("--init", choices=("spectral", "random"), default="spectral")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=250)
    p.add_argument("--tol-residual", type=float, default=1e-10)
    p.add_argument("--output", "-o", required=True,
                   help="result TT; a .json suffix selects the JSON format")
    p.add_argument("--trace", default=None, help="write the solver trace CSV here")
    return parser


def _print_progress(res):
    tag = res.status if res.error is None else f"error: {res.error}"
    print(f"trial {res.trial:3d} {res.solver:6s} rel_error={res.rel_error:.3e} "
          f"iters={res.iterations:4d} {tag}", file=sys.stderr)


def _experiment(args, converge: bool) -> int:
    spec = bench.ExperimentSpec(
        generator=args.generator,
        dims=args.dims,
        ranks=_ranks_for(args.dims, args.ranks),
        os_ratio=args.os_ratio,
        kappa=args.kappa,
        trials=args.trials,
        solvers=args.solvers,
        seed=args.seed,
        success_threshold=args.threshold,
        max_iters=args.max_iters,
        tol_residual=args.tol_residual,
        init=args.init,
        output=args.out,
    )
    workers = args.workers if args.workers is not None else default_workers()
    progress = _print_progress if args.verbose else None
    if converge:
        result = bench.convergence_experiment(spec, progress=progress, workers=workers)
    else:
        result = bench.recovery_experiment(spec, progress=progress, workers=workers)
    for name, rate in result.rates().items():
        print(f"{name}\t{rate:.3f}")
    if args.out:
        bench.emit_report(result, args.out)
    for t in result.failed:
        print(f"trial {t.trial} solver {t.solver} failed: {t.error}", file=sys.stderr)
    return 1 if result.failed else 0


def _interpolate(args) -> int:
    results = bench.interpolation_experiment(
        kind=args.kind,
        dims=args.dims,
        max_ranks=_ranks_for(args.dims, args.max_ranks),
        fraction=args.fraction,
        solvers=args.solvers,
        seed=args.seed,
        test_size=args.test_size,
    )
    for r in results:
        print(f"{r.solver}\t{r.test_error:.3e}\t{r.iterations}")
    if args.out:
        bench.emit_report(results, args.out)
    return 0


def _complete(args) -> int:
    S = io.load_samples(args.samples)
    ranks = _ranks_for(S.dims, args.ranks)
    X0 = bench.initial_point(S, ranks, args.init, bench.trial_rng(args.seed))
    cfg = SolverConfig(max_iters=args.max_iters, tol_residual=args.tol_residual, seed=args.seed)
    X, trace = solve(args.solver, X0, S, cfg)
    if args.output.endswith(".json"):
        io.save_tt_json(X, args.output)
    else:
        io.save_tt(X, args.output)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"{args.solver}: {trace.iterations} iterations, relative residual "
          f"{trace.last.rel_residual:.3e} ({trace.stop_reason})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("recover", "converge"):
            return _experiment(args, converge=args.command == "converge")
        if args.command == "interpolate":
            return _interpolate(args)
        return _complete(args)
    except (ValueError, OSError) as exc:
        print(f"ttq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
