"""Command-line driver: ``impactx run``, ``impactx export-maps``, ``impactx report``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import (CompatibilityError, ConfigError, DataError, NumericError, StateError)
from .experiment import PHASES, Run, export_maps, report

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    # a missing prerequisite artifact counts as a data problem
    if isinstance(exc, (DataError, CompatibilityError, StateError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_CONFIG


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = args.out
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impactx", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate, resuming finished phases")
    run.add_argument("--config", required=True)
    run.add_argument("--phase", default="all", choices=PHASES + ("all",))
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--out")

    exp = sub.add_parser("export-maps", help="write input and attribution maps as PGM images")
    exp.add_argument("--config", required=True)
    exp.add_argument("--n", type=int, default=8)
    exp.add_argument("--external", action="store_true", help="also export a partition-SHAP map")
    exp.add_argument("--maps-dir", help="defaults to <out>/maps")
    exp.add_argument("--seed", type=int)
    exp.add_argument("--out")

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    phase = "config"
    try:
        if args.command == "run":
            cfg = _load(args)
            run = Run(cfg)
            run.open()
            for name in (PHASES if args.phase == "all" else (args.phase,)):
                phase = name
                getattr(run, {"eval": "evaluate"}.get(name, name))()
            print(f"{cfg.out}: phases {', '.join(run.manifest()['phases'])} complete")
        elif args.command == "export-maps":
            cfg = _load(args)
            phase = "export-maps"
            files = export_maps(Run(cfg), args.n, args.maps_dir, args.external)
            print(f"wrote {len(files)} maps")
        else:
            phase = "report"
            print(report(args.out))
    except (ConfigError, StateError, DataError, CompatibilityError, NumericError, FileNotFoundError,
            ValueError) as exc:
        print(f"impactx: {phase} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
