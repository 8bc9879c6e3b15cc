"""Command line front end.

Subcommands: run (dispatch on the scenario's mode), moments, converge,
validate.  Flags override scenario keys.  Exit codes: 0 success,
1 usage, 2 scenario/validation error, 3 numerical failure (including
failed validation-suite checks).
"""

from __future__ import annotations

import argparse
import sys

from . import studies
from .errors import FragFemError, NumericalError, ParseError, ValidationError
from .assembly import GainQuadrature
from .mesh import GridSpec
from .scenario import MMS_POLICIES, parse_scenario

_USAGE_EXIT = 1
_VALIDATION_EXIT = 2
_NUMERICAL_EXIT = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fragfem",
        description="Galerkin solver for multidimensional fragmentation "
                    "equations")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="scenario file path")
            sp.add_argument("--tau", type=float, help="override time step")
            sp.add_argument("--degree", type=int, choices=(1, 2, 3),
                            help="override element degree")
            sp.add_argument("--grid", help="override grid cells, e.g. 40x40")
            sp.add_argument("--grading", choices=("uniform", "geometric"),
                            help="override grid grading")
            sp.add_argument("--mms", choices=MMS_POLICIES,
                            help="override manufactured-source policy")
        sp.add_argument("--workers", type=int,
                        help="assembly worker threads (default: "
                             "FRAGFEM_THREADS or hardware)")
        sp.add_argument("--csv", help="write result tables as CSV")
        sp.add_argument("--json", help="write the full report as JSON")

    add_common(sub.add_parser("run", help="run the scenario's mode"))
    add_common(sub.add_parser("moments", help="moment-reproduction study"))
    add_common(sub.add_parser("converge", help="convergence-order sweep"))
    v = sub.add_parser("validate", help="self-check invariant suite")
    v.add_argument("--inject", choices=studies.INJECTIONS,
                   help="deliberately break an invariant (negative control)")
    add_common(v, scenario=False)
    return p


def _apply_overrides(scn, args):
    if args.tau is not None:
        if args.tau <= 0.0:
            raise ValidationError("--tau must be positive")
        scn.tau = args.tau
        scn.echo["tau"] = args.tau
    if args.degree is not None:
        scn.degree = args.degree
        scn.echo["degree"] = args.degree
    if args.grid is not None:
        toks = args.grid.lower().replace("x", " ").split()
        try:
            cells = tuple(int(t) for t in toks)
        except ValueError:
            raise ValidationError(f"--grid: expected counts, got "
                                  f"{args.grid!r}")
        if len(cells) == 1:
            cells = cells * scn.dim
        grading = args.grading or (scn.grid.grading if scn.grid else
                                   "geometric" if scn.dim == 2 else "uniform")
        scn.grid = GridSpec(cells, grading)
        scn.echo["cells"] = cells
        scn.echo["grading"] = grading
    elif args.grading is not None:
        if scn.grid is None:
            raise ValidationError("--grading needs --grid or a [grid] "
                                  "section")
        scn.grid = GridSpec(scn.grid.cells, args.grading)
        scn.echo["grading"] = args.grading
    if args.mms is not None:
        scn.mms = args.mms
        scn.echo["mms"] = args.mms
    if args.workers is not None:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        scn.workers = args.workers
    if args.csv is not None:
        scn.csv_path = args.csv
    if args.json is not None:
        scn.json_path = args.json


def _print_table(table):
    print(f"[{table.name}]")
    widths = [len(h) for h in table.headers]
    rendered = [[studies._fmt_cell(v) for v in row] for row in table.rows]
    for row in rendered:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    print("  " + "  ".join(h.ljust(w)
                           for h, w in zip(table.headers, widths)))
    for row in rendered:
        print("  " + "  ".join(c.ljust(w) for c, w in zip(row, widths)))


def _emit(report, csv_path, json_path):
    for table in report.tables.values():
        _print_table(table)
    for case_id, res in report.residuals.items():
        print(f"residual check [{case_id}]: {res['verdict']} "
              f"(max residual {res['max_residual']:.3e})")
    if csv_path:
        for path in studies.write_csv(report, csv_path):
            print(f"wrote {path}")
    if json_path:
        studies.write_json(report, json_path)
        print(f"wrote {json_path}")


def _run_study(scn, mode):
    if mode in ("run", None):
        mode = scn.mode
    if mode in ("moments", "run"):
        return studies.run_moment_study(scn)
    if mode == "convergence":
        return studies.run_convergence_sweep(scn)
    raise ValidationError(f"scenario mode {scn.mode!r} has no runner; "
                          "use the validate subcommand")


def _cmd_validate(args) -> int:
    report = studies.run_validation_suite(inject=args.inject,
                                          workers=args.workers)
    for c in report.checks:
        tag = "PASS" if c["passed"] else "FAIL"
        print(f"{tag}  {c['name']}: measured {c['measured']:.3e} "
              f"(bound {c['bound']:.3e})")
    if args.csv:
        checks = studies.Table("checks",
                               ["name", "measured", "bound", "passed"])
        for c in report.checks:
            checks.add(c["name"], c["measured"], c["bound"], c["passed"])
        report.tables["checks"] = checks
        for path in studies.write_csv(report, args.csv):
            print(f"wrote {path}")
    if args.json:
        studies.write_json(report, args.json)
        print(f"wrote {args.json}")
    return 0 if report.ok else _NUMERICAL_EXIT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return 0 if exc.code == 0 else _USAGE_EXIT

    try:
        if args.command == "validate":
            return _cmd_validate(args)
        scn = parse_scenario(args.scenario)
        _apply_overrides(scn, args)
        mode = {"run": None, "moments": "moments",
                "converge": "convergence"}[args.command]
        report = _run_study(scn, mode)
        _emit(report, args.csv or scn.csv_path, args.json or scn.json_path)
        return 0
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _VALIDATION_EXIT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return _NUMERICAL_EXIT
    except FragFemError as exc:                      # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return _VALIDATION_EXIT


if __name__ == "__main__":                           # pragma: no cover
    sys.exit(main())
