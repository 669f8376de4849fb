"""
bench-hedge command line.

    bench-hedge <task> --config <path> [--threads N] [--out DIR] [--log-level LEVEL]

The task must match task.name in the config. OUTPUT_DIR from the
environment (or a .env file) is the only setting read outside the config.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv

from cli.config import TASKS
from cli.runner import run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench-hedge",
                                     description="Benchmarked pricing and risk-minimizing hedging experiments")
    parser.add_argument("task", choices=TASKS, help="task to run (must match task.name in the config)")
    parser.add_argument("--config", required=True, help="path to the JSON experiment config")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on worker processes (default min(cpu_count, 8)); results do not depend on it")
    parser.add_argument("--out", default=None, help="output directory (overrides OUTPUT_DIR and output.directory)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_dotenv()
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    code = run(args.config, task=args.task, threads=args.threads, out=args.out)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
