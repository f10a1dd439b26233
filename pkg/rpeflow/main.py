"""
Command-line entry point.
"""
import argparse
import sys
import time
from typing import List, Optional

from pydantic import ValidationError

from rpeflow import commands
from rpeflow.config import settings
from rpeflow.errors import RPEFlowError, UsageError
from rpeflow.logging_utils import setup_logging
from rpeflow.metrics import record_stage_latency

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

COMMANDS = [
    commands.gen_command,
    commands.train_command,
    commands.eval_command,
    commands.gradcheck_command,
    commands.viz_command,
    commands.ablate_command,
    commands.schema_command,
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpeflow",
        description="Joint optical-flow and scene-flow estimation from images, point clouds and events.",
    )
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True
    for cmd in COMMANDS:
        p = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        cmd.configure(p)
        p.set_defaults(handler=cmd.handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logger = setup_logging(args.log_level)
    start = time.perf_counter()
    try:
        code = args.handler(args, logger)
    except (UsageError, ValidationError) as exc:
        code = EXIT_USAGE
        logger.error(str(exc), extra={"command": args.command, "exit_code": code})
        print(f"rpeflow {args.command}: usage error: {exc}", file=sys.stderr)
    except RPEFlowError as exc:
        code = EXIT_FAILURE
        logger.error(str(exc), extra={"command": args.command, "exit_code": code})
        print(f"rpeflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    else:
        logger.info("command finished", extra={"command": args.command, "exit_code": code})
    record_stage_latency(args.command, (time.perf_counter() - start) * 1000.0)
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
