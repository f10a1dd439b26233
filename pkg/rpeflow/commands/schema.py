"""
schema: print the JSON schema of the run configuration.
"""
import argparse
import logging

from rpeflow.commands.common import Command, print_json
from rpeflow.schemas import RunConfig


def configure(parser: argparse.ArgumentParser) -> None:
    pass


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    print_json(RunConfig.model_json_schema())
    return 0


command = Command("schema", "print the run configuration JSON schema", configure, handle)
