"""
eval: metric report of a checkpoint on one split.
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List

from rpeflow import storage
from rpeflow.commands.common import Command, add_run_arguments, build_run_config, finish
from rpeflow.errors import UsageError
from rpeflow.objectives import METRIC_COLUMNS
from rpeflow.training import EvalResult, FINAL_CHECKPOINT, evaluate_run, write_predictions

REPORT_JSON = "eval_report.json"
REPORT_TABLE = "eval_report.txt"


def configure(parser: argparse.ArgumentParser) -> None:
    add_run_arguments(parser)
    parser.add_argument("--checkpoint", type=Path, help=f"checkpoint directory (default: <out>/{FINAL_CHECKPOINT})")
    parser.add_argument("--split", default="val")
    parser.add_argument("--oracle", action="store_true", help="score the ground truth against itself")


def report_rows(result: EvalResult) -> List[Dict[str, object]]:
    rows: List[Dict[str, object]] = [{"sample": name, **r.row()} for name, r in result.reports.items()]
    rows.append({"sample": "mean", **result.mean.row()})
    return rows


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    run = build_run_config(args)
    out_dir = Path(run.out)
    checkpoint = None
    if not args.oracle:
        checkpoint = args.checkpoint or out_dir / FINAL_CHECKPOINT
        if not Path(checkpoint).exists():
            raise UsageError(f"checkpoint {checkpoint} does not exist")
    # an explicit structure must match the checkpoint; otherwise the stored one is used
    explicit = args.config is not None or args.tiny
    model_cfg = run.effective_model() if explicit else None

    logger.info("evaluating", extra={"command": "eval", "path": str(checkpoint or "oracle")})
    try:
        result = evaluate_run(run.data, args.split, checkpoint, model_cfg, oracle=args.oracle)
        storage.write_json(out_dir / REPORT_JSON, result.to_dict())
        table = storage.format_table(report_rows(result), ["sample", *METRIC_COLUMNS.values()])
        storage.write_text(out_dir / REPORT_TABLE, table)
        write_predictions(out_dir, result)
    finally:
        finish(out_dir)
    print(table, end="")
    return 0


command = Command("eval", "evaluate a checkpoint", configure, handle)
