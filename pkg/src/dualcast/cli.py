"""Command-line entry point: run scenarios, sweep them, re-check traces, evaluate the model.

Exit codes: 0 ok, 1 a check failed, 2 the scenario or arguments are invalid,
3 the simulated time bound was hit.
"""

import argparse
import csv
import itertools
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import analysis
from .analysis import (DomainError, MissingParameter, PerfModel, WindowNotReached, check_all,
                       check_eon_barrier, summarize)
from .sim import Simulator, load_trace, parse_scenario

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_TIMEOUT = 0, 1, 2, 3

SWEEP_HEADER = ("run", "seed", "status", "mean_throughput", "rounds_delivered",
                "failed_checks", "transitions")


def _out_dir(args):
    return args.out or os.environ.get("DUALCAST_OUT") or "."


def _say(args, text):
    if not args.quiet:
        print(text)


def _read(path):
    with open(path) as fh:
        return fh.read()


def _simulate(text, seed=None):
    """Parse and run one scenario; returns (status, trace, reports, error text)."""
    try:
        sc = parse_scenario(text)
        if seed is not None:
            sc.seed = seed
        trace = Simulator(sc).run()
    except ValueError as exc:
        return EXIT_CONFIG, None, [], str(exc)
    reports = check_all(trace, uniform=sc.uniform)
    if sc.eons:
        reports.append(check_eon_barrier(trace))
    if trace.timed_out:
        status = EXIT_TIMEOUT
    elif any(r.verdict == analysis.FAIL for r in reports):
        status = EXIT_CHECK
    else:
        status = EXIT_OK
    return status, trace, reports, ""


def _metrics(trace):
    try:
        return summarize(trace)
    except WindowNotReached:
        return summarize(trace, window=False)


def cmd_run(args):
    status, trace, reports, err = _simulate(_read(args.scenario), args.seed)
    if status == EXIT_CONFIG:
        print("error: %s" % err, file=sys.stderr)
        return status
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    trace.save(os.path.join(out, "trace.tsv"))
    _metrics(trace).write_csv(os.path.join(out, "metrics.csv"))
    with open(os.path.join(out, "checks.txt"), "w") as fh:
        for r in reports:
            fh.write("%s\n" % r)
    for r in reports:
        _say(args, str(r))
    if status == EXIT_TIMEOUT:
        print("error: time bound exceeded at %d ns" % trace.end_time, file=sys.stderr)
    return status


def _parse_vary(items):
    axes = []
    for item in items or ():
        key, sep, vals = item.partition("=")
        if not sep or not key:
            raise ValueError("--vary expects key=v1,v2 (got %r)" % item)
        axes.append((key.strip(), [v.strip() for v in vals.split(",") if v.strip()]))
    return axes


def _apply_vary(template, assignment):
    """Rewrite or append ``key=value`` lines; list keys such as ``fail`` are replaced wholesale."""
    lines = template.splitlines()
    for key, val in assignment:
        lines = [ln for ln in lines if ln.split("#", 1)[0].partition("=")[0].strip() != key]
        lines.extend("%s=%s" % (key, v) for v in val.split(";") if v)
    return "\n".join(lines) + "\n"


def _sweep_one(job):
    idx, text, seed = job
    status, trace, reports, err = _simulate(text, seed)
    if status == EXIT_CONFIG:
        return idx, seed, status, float("nan"), 0, err, ""
    failed = ";".join(r.name for r in reports if r.verdict == analysis.FAIL)
    rounds = min((len(trace.deliveries.get(s, [])) for s in trace.correct()), default=0)
    hist = ";".join("%s:%d" % kv for kv in sorted(trace.histogram.items()))
    return idx, seed, status, _metrics(trace).mean_throughput(), rounds, failed, hist


def cmd_sweep(args):
    template = _read(args.scenario)
    try:
        axes = _parse_vary(args.vary)
        base = parse_scenario(template)
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    keys = [k for k, _ in axes]
    combos = list(itertools.product(*[vals for _, vals in axes])) if axes else [()]
    base_seed = base.seed if args.seed is None else args.seed
    jobs = []
    for combo in combos:
        text = _apply_vary(template, list(zip(keys, combo)))
        for k in range(args.seeds):
            jobs.append((len(jobs), text, base_seed + k))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    results.sort()

    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    first_bad = None
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(tuple(keys) + SWEEP_HEADER)
        per_seed = args.seeds
        for idx, seed, status, thr, rounds, failed, hist in results:
            combo = combos[idx // per_seed]
            w.writerow(tuple(combo) + (idx, seed, status, round(thr, 3), rounds, failed, hist))
            if status != EXIT_OK and first_bad is None:
                first_bad = (idx, seed, status, failed)
    _say(args, "%d runs written to %s" % (len(results), os.path.join(out, "sweep.csv")))
    if first_bad is None:
        return EXIT_OK
    idx, seed, status, failed = first_bad
    print("first failure: run %d seed %d status %d %s" % (idx, seed, status, failed), file=sys.stderr)
    return status


def cmd_check(args):
    seen = set()
    for path in args.traces:
        try:
            trace = load_trace(path)
        except (OSError, ValueError) as exc:
            print("error: %s: %s" % (path, exc), file=sys.stderr)
            seen.add(EXIT_CONFIG)
            continue
        uniform = bool(int(trace.meta.get("uniform", 0))) or args.uniform
        reports = check_all(trace, uniform=uniform)
        if args.eon:
            reports.append(check_eon_barrier(trace))
        for r in reports:
            _say(args, "%s\t%s" % (path, r))
        if any(r.verdict == analysis.FAIL for r in reports):
            seen.add(EXIT_CHECK)
        elif trace.timed_out:
            seen.add(EXIT_TIMEOUT)
    for code in (EXIT_CONFIG, EXIT_CHECK, EXIT_TIMEOUT):
        if code in seen:
            return code
    return EXIT_OK


def _lambda(text):
    return math.inf if text in ("inf", "infinity") else float(text)


def cmd_model(args):
    model = PerfModel(args.delta_u, args.delta_r, args.lam)
    dr = args.delta_r
    try:
        if args.worst:
            if not 0 < args.delta_u < args.delta_r:
                raise DomainError("need 0 < delta_u < delta_r")
            lat = analysis.worst_case_latency(model, args.worst, args.delta_r_bar)
            thr = analysis.worst_case_throughput(model)
        else:
            perf = analysis.expected_performance(model)
            lat, thr = perf["latency"], perf["throughput"]
    except (DomainError, MissingParameter, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    print("latency/delta_r\tthroughput*delta_r")
    print("%.4f\t%.4f" % (lat / dr, thr * dr))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dualcast", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default $DUALCAST_OUT or .)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="simulate one scenario and check it")
    r.add_argument("scenario")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="run a scenario grid and aggregate")
    s.add_argument("scenario")
    s.add_argument("--vary", action="append", metavar="KEY=V1,V2",
                   help="values for one key; ';' inside a value writes several lines")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", parents=[common], help="re-run the checkers on saved traces")
    c.add_argument("traces", nargs="+")
    c.add_argument("--uniform", action="store_true", help="also check uniform properties")
    c.add_argument("--eon", action="store_true", help="also check the eon barrier")
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("model", parents=[common], help="evaluate the analytic performance model")
    m.add_argument("--delta-u", type=float, required=True)
    m.add_argument("--delta-r", type=float, required=True)
    m.add_argument("--lambda", dest="lam", type=_lambda, default=math.inf)
    m.add_argument("--worst", choices=(analysis.BASELINE, analysis.RERUN_RELIABLY, analysis.MERGED))
    m.add_argument("--delta-r-bar", type=float)
    m.set_defaults(func=cmd_model)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if getattr(args, "seeds", 1) < 1:
        print("error: --seeds must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
