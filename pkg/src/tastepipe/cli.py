"""Command-line entry point: run pipeline stages from a YAML config.

Exit codes: 0 success (including up-to-date no-ops), 1 configuration
error (message names the field), 2 missing upstream artifact (message
names the stage to run), 3 internal/estimation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .econ import EstimationError
from .ingest import MalformedLogError
from .pipeline import STAGES, MissingArtifactError, StageRunner

OUTPUT_DIR_ENV = "TASTEPIPE_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_INTERNAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tastepipe",
        description="Listening-log pipeline: sessions, embeddings, taste metrics, panel/DiD estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one pipeline stage (or 'all')")
    run.add_argument("stage", choices=STAGES + ("all",))
    run.add_argument("--config", required=True, help="pipeline config (YAML)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--workers", type=int, default=None, help="override the worker count")
    run.add_argument("--force", action="store_true", help="re-run even if up to date")
    run.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers", "must be >= 1")
            cfg.workers = args.workers
        env_out = os.environ.get(OUTPUT_DIR_ENV)
        if env_out:
            cfg.output_dir = Path(env_out)
    except ConfigError as exc:
        print(f"config error — {exc}", file=sys.stderr)
        return EXIT_CONFIG

    runner = StageRunner(cfg)
    try:
        if args.stage == "all":
            ran = runner.run_all(force=args.force)
            print(f"ran stages: {', '.join(ran) if ran else '(all up to date)'}")
        else:
            executed = runner.run(args.stage, force=args.force)
            print(f"stage {args.stage}: {'done' if executed else 'up to date'}")
    except ConfigError as exc:
        print(f"config error — {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing upstream artifact — {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except (EstimationError, MalformedLogError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        logging.getLogger(__name__).exception("internal error")
        print(f"internal error — {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
