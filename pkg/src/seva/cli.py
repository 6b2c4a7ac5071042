"""Command-line driver: ``seva <subcommand> --config exp.yaml --out runs/``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .corpus import CorpusError
from .decoder import DecodeError
from .features import FrontEndError
from .lexicon import LexiconError
from .netcore import DimensionError, NumericError
from .pipeline import (STAGE_FUNCS, ArtifactError, ConfigError, ExperimentConfig, RunDir,
                       load_config, run_ablation)
from .seqmodel import CtcError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SUBCOMMANDS = (*STAGE_FUNCS, "ablate")

log = logging.getLogger("seva")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seva", description="Severity-aware dysarthric ASR experiments "
                                         "on a synthetic corpus.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="YAML experiment file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    return p


def _setup_logging() -> None:
    level = os.environ.get("SEVA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def run(subcommand: str, cfg: ExperimentConfig, out_dir, workers: int = 1):
    """Run one subcommand; returns the directory it wrote."""
    if subcommand == "ablate":
        return run_ablation(cfg, out_dir, workers)
    return STAGE_FUNCS[subcommand](RunDir(out_dir, cfg), workers)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("seva: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config) if args.config else load_config(text="")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        out = run(args.subcommand, cfg, args.out, args.workers)
    except NumericError as exc:
        print(f"seva: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"seva: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, CorpusError, DecodeError, FrontEndError, LexiconError, CtcError,
            DimensionError, OSError) as exc:
        print(f"seva: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
