"""Command line front end: validate, run, sweep and md1."""

from __future__ import annotations

import argparse
import csv
import sys

from . import scenario
from .baseline import md1_wait_tail
from .errors import ContractFailure, ShimError, ValidationError

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONTRACT = 2


def _parse_values(text: str) -> list:
    out = []
    for v in text.split(","):
        v = v.strip()
        if not v:
            continue
        try:
            out.append(int(v))
        except ValueError:
            out.append(float(v))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdmshim", description="TDM shim layer simulator")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario config")
    v.add_argument("config", help="config path or preset name")

    r = sub.add_parser("run", help="simulate a scenario and write CSV outputs")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default="out")
    r.add_argument("--trace", choices=("none", "summary", "slots"), default="none")

    s = sub.add_parser("sweep", help="run a scenario once per parameter value")
    s.add_argument("config")
    s.add_argument("--param", required=True, choices=scenario.SWEEP_PARAMS)
    s.add_argument("--values", required=True, type=_parse_values)
    s.add_argument("--out", default="out")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for sub-runs")

    m = sub.add_parser("md1", help="M/D/1 tail probabilities P(N >= n) as CSV")
    m.add_argument("--rho", required=True, type=_parse_values)
    m.add_argument("--nmax", required=True, type=int)
    return p


def _validate(args) -> int:
    d = scenario.load_config(args.config)
    problems = scenario.validate(d)
    for msg in problems:
        print(msg, file=sys.stderr)
    if problems:
        return EXIT_INVALID
    print(f"{args.config}: ok")
    return EXIT_OK


def _run(args) -> int:
    d = scenario.load_config(args.config)
    rep = scenario.run(d, seed=args.seed, out=args.out, trace=args.trace)
    if args.trace in ("summary", "slots"):
        rows = scenario.summary_rows(rep)
        w = csv.DictWriter(sys.stdout, fieldnames=list(scenario.SUMMARY_COLUMNS), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for name, path in sorted(rep.outputs.items()):
        print(f"wrote {path}", file=sys.stderr)
    if rep.failed:
        print(f"run failed: {rep.failed}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def _sweep(args) -> int:
    d = scenario.load_config(args.config)
    rows = scenario.sweep(d, args.param, args.values, out=args.out, jobs=args.jobs)
    print(f"{len(rows)} runs, wrote {args.out}/sweep.csv", file=sys.stderr)
    return EXIT_OK


def _md1(args) -> int:
    if args.nmax < 0:
        raise ValidationError(["--nmax must be >= 0"])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("rho", "n", "p"))
    for rho in args.rho:
        for n in range(args.nmax + 1):
            w.writerow((f"{rho:g}", n, f"{md1_wait_tail(rho, n):.6e}"))
    return EXIT_OK


COMMANDS = {"validate": _validate, "run": _run, "sweep": _sweep, "md1": _md1}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        for msg in e.problems:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except ContractFailure as e:
        print(f"contract failure: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except ShimError as e:
        # configuration-level problems found past validation
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
