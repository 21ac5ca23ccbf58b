"""Command line entry point: ``aflora run`` and ``aflora compare``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .harness import ConfigError, ExperimentConfig, compare, metrics_csv, run_experiment, write_csv
from .linalg import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("aflora")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aflora", description="Federated LoRA fine-tuning simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one method")
    run.add_argument("--config", required=True)
    run.add_argument("--method")
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    run.add_argument("--out", help="CSV path (stdout if omitted)")
    run.add_argument("--dump-rounds", help="directory for per-round JSON dumps")

    cmp_ = sub.add_parser("compare", help="run several methods on identical seeds")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--methods", required=True, help="comma-separated, e.g. aflora,classic,flora")
    cmp_.add_argument("--rounds", type=int)
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--threads", type=int)
    cmp_.add_argument("--out", help="CSV path (stdout if omitted)")
    return p


def _overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    keys = ("method", "rounds", "seed", "threads", "out", "dump_rounds")
    changes = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return replace(cfg, **changes).validate()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _overrides(ExperimentConfig.from_json(args.config), args)
        if args.command == "run":
            metrics = run_experiment(cfg)
        else:
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            for m in methods:
                replace(cfg, method=m).validate()
            metrics = compare(cfg, methods)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    if cfg.out:
        write_csv(metrics, cfg.out)
        log.info("wrote %d rows to %s", len(metrics), cfg.out)
    else:
        sys.stdout.write(metrics_csv(metrics))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
