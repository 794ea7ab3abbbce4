"""Command-line entry point.

Subcommands::

    analyze FILE [--out report.json]
    sweep FILE --param T --range 2.8:3.5 --steps 29 [--out rows.csv]
    reach FILE --target "0,0,0,-1e-4" [--force] [--out summary.json] [--csv traj.csv]
    check-optimality FILE --cost "z4" [--samples 20]

Global options ``--grid-n``, ``--seed`` and ``--no-meta`` may be given
before or after the subcommand.  Exit codes: 0 analysis completed, 2 bad
input, 3 inadmissible reference process, 4 corrector failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys


from .analysis import (
    CorrectorFailure,
    InadmissibleError,
    analyze,
    check_optimality,
    steer,
    sweep,
)
from .corrector import ChatteringControl
from .expr import ExpressionError
from .scenario import load_scenario
from .system import ScenarioError, compile_endpoint_expression
from .trajectory import write_trajectory_csv

EXIT_OK, EXIT_INPUT, EXIT_INADMISSIBLE, EXIT_CORRECTOR = 0, 2, 3, 4


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--grid-n", type=int, default=default, help="grid size N (overrides the scenario)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="random seed")
    parser.add_argument(
        "--no-meta", action="store_true", default=argparse.SUPPRESS if suppress else False, help="omit timestamps"
    )


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ScenarioError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ScenarioError(f"--set {key}: {val!r} is not a number") from None
    return out


def _parse_floats(text, what):
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ScenarioError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _parse_range(text):
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ScenarioError(f"--range expects LO:HI, got {text!r}")
    try:
        return float(lo), float(hi)
    except ValueError:
        raise ScenarioError(f"--range: cannot parse {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("scenario", help="scenario JSON file")
    scen.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario parameter")

    parser = argparse.ArgumentParser(prog="loccontrol", description="Local controllability analysis.")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common, scen], help="full controllability analysis")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("sweep", parents=[common, scen], help="re-run the analysis over a parameter range")
    p.add_argument("--param", required=True)
    p.add_argument("--range", required=True, dest="range_", metavar="LO:HI")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="CSV output path (default stdout)")

    p = sub.add_parser("reach", parents=[common, scen], help="steer to a nearby endpoint target")
    p.add_argument("--target", required=True, help="comma-separated (y1, y2)")
    p.add_argument("--force", action="store_true", help="steer even without a positive verdict")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--radius", type=float, default=1e-2)
    p.add_argument("--out", help="JSON summary path (default stdout)")
    p.add_argument("--csv", help="trajectory CSV path")

    p = sub.add_parser("check-optimality", parents=[common, scen], help="second-order necessary conditions")
    p.add_argument("--cost", help="endpoint cost expression in z1..z2n (default: the scenario's)")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--out", help="JSON report path (default stdout)")
    return parser


def _emit(text, path, stdout):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        stdout.write(text)


def _dump(report):
    return json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _steering_csv(path, result, problem):
    if isinstance(result.controls, ChatteringControl):
        times, states, _ = result.controls.simulate(problem.system, problem.split(result.w)[0])
        u = result.controls.values
    else:
        times, states, u = problem.process.grid.times, result.states, result.controls
    write_trajectory_csv(path, times, {"x": states, "u": u})


def run(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # let values such as "-3:-1" follow their option without an "="
    for i in range(len(argv) - 2, -1, -1):
        if argv[i] in ("--range", "--target") and argv[i + 1].startswith("-"):
            argv[i : i + 2] = [argv[i] + "=" + argv[i + 1]]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    meta = not args.no_meta
    try:
        params = _parse_set(args.set)
        if args.command == "sweep":
            lo, hi = _parse_range(args.range_)
            sc = load_scenario(args.scenario, params=params, grid_n=args.grid_n)
            rows = sweep(sc.config, args.param, lo, hi, args.steps, grid_n=args.grid_n, seed=args.seed, workers=args.workers)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow([args.param, "min_eig", "verdict"])
            for row in rows:
                w.writerow([repr(row["param"]), "" if row["min_eig"] is None else repr(row["min_eig"]), row["verdict"]])
            _emit(buf.getvalue(), args.out, stdout)
            return EXIT_OK
        sc = load_scenario(args.scenario, params=params, grid_n=args.grid_n)
        if args.command == "analyze":
            _emit(_dump(analyze(sc, seed=args.seed, meta=meta)), args.out, stdout)
        elif args.command == "reach":
            target = _parse_floats(args.target, "--target")
            try:
                report, result, problem = steer(
                    sc, target, force=args.force, seed=args.seed, meta=meta,
                    max_iter=args.max_iter, tol=args.tol, radius=args.radius,
                )
            except CorrectorFailure as exc:
                stderr.write(f"corrector failure: {exc}\n")
                return EXIT_CORRECTOR
            if args.csv:
                _steering_csv(args.csv, result, problem)
            _emit(_dump(report), args.out, stdout)
        elif args.command == "check-optimality":
            text = args.cost or sc.cost_text
            if not text:
                raise ScenarioError("no cost given (use --cost or a scenario 'cost' entry)")
            cost = compile_endpoint_expression([text], sc.system.n, sc.params)
            _emit(_dump(check_optimality(sc, cost, samples=args.samples, seed=args.seed, meta=meta)), args.out, stdout)
    except InadmissibleError as exc:
        stderr.write(f"{exc}\n")
        return EXIT_INADMISSIBLE
    except (ScenarioError, ExpressionError, ValueError, OSError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
