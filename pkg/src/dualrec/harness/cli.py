"""Command line entry point: ``dualrec <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from ..trainers import TrainingDivergedError
from . import io as rio
from .config import FORMATS, ConfigError, load_config
from .report import AggregationError
from .runner import (
    VerificationFailure,
    build_report,
    estimate_mi_runs,
    gen_data,
    run_grid,
    run_seed,
    verify_theory,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3, 4
COMMANDS = ("gen-data", "train", "grid", "verify-theory", "estimate-mi", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualrec", description="Dual reconstruction experiments on exact finite spaces.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, help="output directory (default: $DUALREC_OUT or ./dualrec-out)")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--strategy", help="strategy label, e.g. IBT-epoch(2) or DualLearning(0.1)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--format", action="append", choices=FORMATS, dest="formats",
                       help="report format (repeatable; default all)")
    return parser


def _error(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError(f"missing subcommand; choose from {', '.join(COMMANDS)}")
        if args.workers < 1:
            raise _UsageError("--workers must be >= 1")
        seeds = None
        if args.seeds:
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise _UsageError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}")
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        return _error(EXIT_USAGE, "usage", str(e))

    try:
        strategies = [args.strategy] if args.strategy else None
        cfg = load_config(args.config, seeds=seeds, strategies=strategies, formats=args.formats)
        out = args.out or (Path(cfg.out) if cfg.out else rio.default_out_root())
    except ConfigError as e:
        return _error(EXIT_CONFIG, "config", str(e))

    try:
        result = _dispatch(args.command, cfg, out, args.workers)
    except ConfigError as e:
        return _error(EXIT_CONFIG, "config", str(e))
    except VerificationFailure as e:
        return _error(EXIT_VERIFY, "verification", str(e))
    except (AggregationError, FileNotFoundError) as e:
        return _error(EXIT_RUNTIME, "runtime", str(e).strip("'\""))
    except TrainingDivergedError as e:
        return _error(EXIT_RUNTIME, "diverged", str(e))
    except Exception as e:  # noqa: BLE001 - surfaced as a machine-readable record
        traceback.print_exc(file=sys.stderr)
        return _error(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")
    if result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK


def _dispatch(command, cfg, out: Path, workers: int):
    if command == "gen-data":
        return {"written": gen_data(cfg, out)}
    if command in ("train", "grid"):
        rio.write_json(cfg.as_dict(), out / "config.json")
        if command == "train":
            if len(cfg.strategies) != 1:
                raise ConfigError("train runs exactly one strategy; pass --strategy")
            paths = [p for s in cfg.seeds for p in run_seed(cfg, s, out)]
        else:
            paths = run_grid(cfg, out, workers)
        return {"runs": paths}
    if command == "verify-theory":
        summary = verify_theory(cfg, out)
        if not summary["passed"]:
            raise VerificationFailure("theory verification failed; see theory/verification.json")
        return {"passed": True, "cases": len(summary["cases"])}
    if command == "estimate-mi":
        recs = estimate_mi_runs(cfg, out)
        return {"estimates": len(recs), "all_in_range": all(r["in_range"] for r in recs)}
    if command == "report":
        return {"outputs": build_report(out, cfg.formats)["outputs"]}
    raise ConfigError(f"unknown command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
