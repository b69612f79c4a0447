"""Command-line experiment driver.

Verbs:
  run <manifest>       execute an experiment across its seed list
  report <run_dir>     rebuild the summary table and figure data
  validate <manifest>  check a manifest without running anything
  oracle <check>       run the finite-difference / dense-Hessian suites

Exit codes: 0 ok, 2 validation failure, 3 runtime failure. The output
root for runs defaults to $DISTILLAB_OUTPUT_ROOT (or the working
directory) when neither --out nor the manifest names one.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ContractError, ManifestError
from .experiments import OUTPUT_ROOT_ENV, load_manifest, report, run
from .oracles import ORACLE_CHECKS, run_oracle

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _resolve_out_dir(args, manifest, manifest_path: Path) -> Path:
    if args.out:
        return Path(args.out)
    if manifest.output_dir:
        return Path(manifest.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    return Path(root) / manifest_path.stem


def _cmd_run(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = load_manifest(manifest_path)
    except ManifestError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    out = _resolve_out_dir(args, manifest, manifest_path)
    try:
        run(manifest, out, force=args.force)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        out = report(Path(args.run_dir))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"report written: {out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        load_manifest(Path(args.manifest))
    except ManifestError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    print("manifest ok")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        results = run_oracle(args.check)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_VALIDATION
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute an experiment manifest")
    p_run.add_argument("manifest")
    p_run.add_argument("--out", help="output directory (overrides manifest and env)")
    p_run.add_argument("--force", action="store_true", help="overwrite an existing run")
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="summarize a finished run")
    p_report.add_argument("run_dir")
    p_report.set_defaults(func=_cmd_report)

    p_validate = sub.add_parser("validate", help="validate a manifest")
    p_validate.add_argument("manifest")
    p_validate.set_defaults(func=_cmd_validate)

    p_oracle = sub.add_parser("oracle", help="run verification oracle suites")
    p_oracle.add_argument("check", choices=sorted(ORACLE_CHECKS) + ["all"])
    p_oracle.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
