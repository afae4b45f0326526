"""Command-line interface: ``jkcals {gen,fit,jackknife,bench,report}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
``JKCALS_THREADS`` sets the default thread count and ``JKCALS_MAX_COLUMNS``
the fused-workspace column budget.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bench import (
    BenchReport,
    SyntheticSpec,
    bench_mttkrp,
    comparison_rows,
    format_table,
    generate,
    make_record,
    parse_ranks,
    rows_to_csv,
)
from .cals import cals_fit
from .cp import FitConfig, cp_als_fit, init_random
from .exceptions import NumericalBreakdownError
from .flops import FlopCounter
from .io import FormatError, load_model, read_tensor, save_bundle, save_model, write_tensor
from .jackknife import JackknifeConfig, jk_als, jk_cals_multi, jk_parallel

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("jkcals")


class UsageError(Exception):
    pass


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use e.g. 50,200,200")
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"dims must be positive: {text!r}")
    return dims


def _default_threads():
    return int(os.environ.get("JKCALS_THREADS", 1))


def _fit_config(args):
    return FitConfig(tolerance=args.tol, max_iterations=args.max_iters,
                     force_iterations=args.force_iters)


def _add_fit_flags(p):
    p.add_argument("--tol", type=float, default=1e-6, help="relative error-change tolerance")
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--force-iters", type=int, default=None,
                   help="run exactly this many sweeps, ignoring --tol/--max-iters")


def build_parser():
    parser = argparse.ArgumentParser(prog="jkcals", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic low-rank tensor")
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0, help="relative Frobenius noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True,
                   help="output file; .bin/.dtnsr selects the binary format")

    p = sub.add_parser("fit", help="fit CP model(s) by ALS")
    p.add_argument("--tensor", type=Path, required=True)
    p.add_argument("--rank", type=int, nargs="+", required=True,
                   help="one rank per model; several ranks are fitted concurrently")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_fit_flags(p)

    p = sub.add_parser("jackknife", help="jackknife a fitted model")
    p.add_argument("--tensor", type=Path, required=True)
    p.add_argument("--model", type=Path, nargs="+", required=True,
                   help="model directories; several share one fused pool with --method cals")
    p.add_argument("--mode", type=int, default=0, help="sampled mode (0-based)")
    p.add_argument("--d", type=int, default=1, help="samples removed per submodel")
    p.add_argument("--method", choices=["als", "oals", "cals"], default="cals")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="results bundle directory")
    p.add_argument("--report", type=Path, default=None, help="append a run record to this CSV")
    p.add_argument("--tpp", type=float, default=None, help="theoretical peak, GFLOP/s")
    _add_fit_flags(p)

    p = sub.add_parser("bench", help="kernel benchmarks")
    bsub = p.add_subparsers(dest="kernel", required=True)
    b = bsub.add_parser("mttkrp", help="MTTKRP efficiency over a rank sweep")
    b.add_argument("--dims", type=_dims, default=(50, 200, 200))
    b.add_argument("--ranks", type=str, default="log:1:400:16",
                   help="comma list or log:LO:HI:COUNT")
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--mode", type=int, default=0)
    b.add_argument("--tpp", type=float, default=None, help="theoretical peak, GFLOP/s")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")

    p = sub.add_parser("report", help="compare jackknife runs")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--reference", default="reference_als")
    p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")
    return parser


def cmd_gen(args):
    T, _ = generate(SyntheticSpec(args.dims, args.rank, args.noise, args.seed))
    write_tensor(args.out, T)
    print(f"wrote {args.out} dims={T.dims}")


def cmd_fit(args):
    T = read_tensor(args.tensor)
    cfg = _fit_config(args)
    inits = [init_random(T.dims, R, args.seed + i) for i, R in enumerate(args.rank)]
    with threadpool_limits(limits=args.threads or _default_threads()):
        if len(inits) == 1:
            models = [cp_als_fit(T, inits[0], cfg)]
        else:
            models = cals_fit(T, inits, cfg)
    for i, model in enumerate(models):
        out = args.out if len(models) == 1 else args.out / f"model_{i}_rank{model.rank}"
        save_model(out, model)
        rel = model.errors[-1] / T.norm_sq if T.norm_sq else 0.0
        print(f"{out}: rank={model.rank} iterations={model.iterations} "
              f"converged={model.converged} rel_error={rel:.3e}")


def cmd_jackknife(args):
    T = read_tensor(args.tensor)
    models = [load_model(p) for p in args.model]
    threads = args.threads or _default_threads()
    method = {"als": "reference_als", "oals": "parallel_als", "cals": "cals"}[args.method]
    try:
        cfg = JackknifeConfig(sampled_mode=args.mode, d=args.d, fit=_fit_config(args),
                              method=method, alignment=not args.no_align, threads=threads)
        cfg.check(T.dims)
        for P in models:
            if P.dims != T.dims:
                raise ValueError(f"model dims {P.dims} do not match tensor dims {T.dims}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    counter = FlopCounter()
    t0 = time.perf_counter()
    if method == "cals":
        with threadpool_limits(limits=threads):
            results = jk_cals_multi(T, models, cfg, counter)
    elif method == "parallel_als":
        results = [jk_parallel(T, P, cfg, counter, threads=threads) for P in models]
    else:
        with threadpool_limits(limits=threads):
            results = [jk_als(T, P, cfg, counter) for P in models]
    wall = time.perf_counter() - t0

    for k, (subs, unc) in enumerate(results):
        out = args.out if len(results) == 1 else args.out / f"model_{k}"
        save_bundle(out, subs, unc, cfg, extra={
            "tensor": str(args.tensor),
            "model": str(args.model[k]),
            "rank": models[k].rank,
            "threads": threads,
            "wall_time_seconds": wall,
            "mttkrp_flops": counter.mttkrp,
            "total_flops": counter.total,
        })
        print(f"{out}: {unc.n_submodels} submodels, failures={len(subs.failures)}")
    if args.report is not None:
        report = BenchReport()
        report.append(make_record(method, T.dims, [P.rank for P in models], args.d, threads,
                                  wall, counter, args.tpp))
        report.write(args.report)
    print(f"method={method} wall={wall:.3f}s mttkrp_flops={counter.mttkrp}")


def cmd_bench(args):
    ranks = parse_ranks(args.ranks)
    with threadpool_limits(limits=args.threads or _default_threads()):
        rows = bench_mttkrp(args.dims, ranks, args.reps, args.mode, args.tpp, args.seed)
    text = rows_to_csv(rows)
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)


def cmd_report(args):
    report = BenchReport.read(*args.runs)
    if not report.records:
        raise UsageError("no run records found")
    rows = comparison_rows(report, args.reference)
    print(format_table(rows))
    if args.csv is not None:
        args.csv.write_text(rows_to_csv(rows))


COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "jackknife": cmd_jackknife,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"jkcals {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalBreakdownError, FloatingPointError) as exc:
        print(f"jkcals {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
