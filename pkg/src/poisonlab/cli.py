"""Command-line interface.

Subcommands::

    poisonlab run <config.json>            execute an experiment
    poisonlab sweep <config.json> --axis {lambda,rho}
    poisonlab verify                       run the invariant/oracle suite
    poisonlab report <records.jsonl> --out <dir>

``run`` and ``sweep`` write JSON-lines records (``--records``) and exit 0
only when every record succeeded. Worker count comes from the
POISONLAB_WORKERS environment variable (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    load_records,
    report,
    run,
    save_records,
    sweep,
    write_sweep_csv,
)


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="run an experiment config over all seeds")
    p.add_argument("config", type=Path, help="experiment config (JSON)")
    p.add_argument("--records", type=Path, default=Path("records.jsonl"),
                   help="output JSON-lines record file (default records.jsonl)")
    p.add_argument("--report-dir", type=Path, default=None,
                   help="also aggregate the records into this directory")


def _add_sweep(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("sweep", help="sweep one axis of an experiment config")
    p.add_argument("config", type=Path)
    p.add_argument("--axis", required=True, choices=("lambda", "rho"))
    p.add_argument("--records", type=Path, default=Path("sweep_records.jsonl"))
    p.add_argument("--csv", type=Path, default=Path("sweep.csv"),
                   help="plot-ready CSV of attack vs random effectiveness")


def _add_verify(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("verify", help="run all invariant and oracle checks")
    p.add_argument("--out", type=Path, default=None,
                   help="write the pass/fail manifest to this JSON file")
    p.add_argument("--check", action="append", default=None, metavar="NAME",
                   help="run only the named check (repeatable)")
    p.add_argument("--list", action="store_true", help="list check names and exit")


def _add_report(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("report", help="aggregate a record file into tables")
    p.add_argument("records", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    records = run(config)
    save_records(records, args.records)
    n_failed = sum(r.failed for r in records)
    for rec in records:
        status = "ok    " if not rec.failed else "FAILED"
        print(f"{status} seed={rec.seed} lam={rec.lam} role={rec.role}"
              + (f" ({rec.failure})" if rec.failure else ""))
    print(f"{len(records)} records -> {args.records} ({n_failed} failed)")
    if args.report_dir is not None:
        report(records, args.report_dir)
        print(f"report -> {args.report_dir}")
    return 1 if n_failed else 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    records, rows = sweep(config, args.axis)
    save_records(records, args.records)
    write_sweep_csv(rows, args.csv)
    n_failed = sum(r.failed for r in records)
    print(f"{len(records)} records -> {args.records} ({n_failed} failed)")
    print(f"{len(rows)} sweep rows -> {args.csv}")
    return 1 if n_failed else 0


def _cmd_verify(args: argparse.Namespace) -> int:
    from .checks import CHECKS, run_verify

    if args.list:
        for name, _ in CHECKS:
            print(name)
        return 0
    manifest = run_verify(names=tuple(args.check) if args.check else None)
    for c in manifest["checks"]:
        mark = "PASS" if c["passed"] else "FAIL"
        print(f"[{mark}] {c['name']}: {c['detail']}")
    print(f"{manifest['n_passed']}/{manifest['n_checks']} checks passed "
          f"(backend: {manifest['backend']})")
    if args.out is not None:
        args.out.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        print(f"manifest -> {args.out}")
    return 0 if manifest["passed"] else 1


def _cmd_report(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    summary = report(records, args.out)
    print(f"{summary['n_records']} records, {summary['n_failed']} failed")
    for warning in summary["integrity_warnings"]:
        print(f"WARNING: {warning}", file=sys.stderr)
    print(f"report -> {args.out}")
    return 1 if summary["n_failed"] or summary["integrity_warnings"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonlab",
        description="covert memory-poisoning attack laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_sweep(sub)
    _add_verify(sub)
    _add_report(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "verify": _cmd_verify,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
