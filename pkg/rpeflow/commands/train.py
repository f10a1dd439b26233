"""
train: fit the network on the train split.
"""
import argparse
import logging
from pathlib import Path

from rpeflow.commands.common import Command, add_run_arguments, build_run_config, finish, print_json
from rpeflow.errors import UsageError
from rpeflow.training import train


def configure(parser: argparse.ArgumentParser) -> None:
    add_run_arguments(parser)
    parser.add_argument("--resume", type=Path, help="checkpoint directory to continue from")


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    run = build_run_config(args)
    if args.resume is not None and not args.resume.exists():
        raise UsageError(f"checkpoint {args.resume} does not exist")
    try:
        result = train(run, resume=args.resume)
    finally:
        finish(Path(run.out))
    print_json({
        "iterations": result.iterations,
        "final_loss": result.final_loss,
        "best_loss": result.best_loss,
        "final_epe2d_train": result.final_epe2d,
        "checkpoint": str(result.checkpoint),
        "best_checkpoint": str(result.best_checkpoint),
    })
    return 0


command = Command("train", "train the joint flow network", configure, handle)
