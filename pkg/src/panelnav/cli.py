"""Command line entry point: one subcommand per run mode plus ``compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import MODES, ConfigError, ExperimentConfig, emit_report, load_config, prepare, run_fusion_compare, \
    run_mode

log = logging.getLogger("panelnav")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="panelnav", description="Panel inspection localization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the mode named by --mode or the config")
    run.add_argument("--mode", choices=MODES)
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=f"run mode {mode}")
    sub.add_parser("compare", parents=[common], help="EKF-all and EKF-adaptive on one event stream")
    dump = sub.add_parser("config", parents=[common], help="print the effective config as JSON")
    dump.add_argument("--mode", choices=MODES)
    return p


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["output_dir"] = str(args.out)
    mode = getattr(args, "mode", None)
    if args.command in MODES:
        mode = args.command
    if mode is not None:
        kw["mode"] = mode
    return cfg.with_(**kw) if kw else cfg


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        if args.command == "config":
            print(cfg.dumps())
            return 0
        out = Path(cfg.output_dir)
        if args.command == "compare":
            reports = run_fusion_compare(cfg, prepare(cfg))
            emit_report(reports, out)
        else:
            reports = run_mode(cfg, out)
        for r in reports:
            if r.metrics is not None:
                print(r.metrics.summary_row(r.name))
        print(f"wrote {out}")
        return 0
    except ConfigError as exc:
        return _error("config", str(exc), 2)
    except OSError as exc:
        return _error("io", f"{exc.filename or ''}: {exc.strerror or exc}", 3)
    except (ValueError, RuntimeError) as exc:
        return _error(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
