"""
ablate: train and evaluate the component-ablation configurations with matched seeds.
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List

from rpeflow import storage
from rpeflow.commands.common import Command, add_run_arguments, build_run_config, finish
from rpeflow.errors import UsageError
from rpeflow.schemas import AblationFlags, RunConfig
from rpeflow.training import evaluate_run, train

ABLATION_DIR = "ablation"
REPORT_JSON = "ablation_report.json"
REPORT_TABLE = "ablation_report.txt"
COLUMNS = ("row", "seed", "EPE2D", "ACC1px", "EPE3D^Full", "ACC.05^Full")

# Structural configurations; the decoder-only event variant has no row here
ROWS: Dict[str, AblationFlags] = {
    "a": AblationFlags(no_event=True, concat_fusion=True, no_mi=True),
    "b": AblationFlags(no_event=True, no_mi=True),
    "c": AblationFlags(no_event=True),
    "e": AblationFlags(concat_fusion=True, no_mi=True),
    "f": AblationFlags(no_mi=True),
    "g": AblationFlags(),
}


def configure(parser: argparse.ArgumentParser) -> None:
    add_run_arguments(parser)
    parser.add_argument("--rows", default="".join(ROWS), help="row letters to run, e.g. 'ag'")
    parser.add_argument("--seeds", type=int, default=1, help="number of seeds per row")
    parser.add_argument("--split", default="val")


def row_config(base: RunConfig, row: str, seed: int, out_dir: Path) -> RunConfig:
    return base.model_copy(update={
        "ablation": ROWS[row],
        "optim": base.optim.model_copy(update={"seed": seed}),
        "out": str(out_dir / f"row_{row}" / f"seed_{seed}"),
    })


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    rows = list(args.rows)
    unknown = [r for r in rows if r not in ROWS]
    if unknown or not rows:
        raise UsageError(f"unknown ablation rows {unknown}; choose from {''.join(ROWS)}")
    if args.seeds < 1:
        raise UsageError(f"--seeds must be at least 1, got {args.seeds}")
    if args.no_event or args.no_mi or args.concat_fusion:
        raise UsageError("ablation flags are set per row; drop --no-event/--no-mi/--concat-fusion")
    base = build_run_config(args)
    out_dir = Path(base.out) / ABLATION_DIR
    seeds = [base.optim.seed + k for k in range(args.seeds)]

    results: List[Dict[str, object]] = []
    try:
        for row in rows:
            for seed in seeds:
                run = row_config(base, row, seed, out_dir)
                logger.info("ablation run", extra={"command": "ablate", "path": run.out})
                trained = train(run)
                report = evaluate_run(run.data, args.split, trained.checkpoint).mean
                results.append({
                    "row": row,
                    "seed": seed,
                    "EPE2D": report.epe2d,
                    "ACC1px": report.acc1px,
                    "EPE3D^Full": report.epe3d_full,
                    "ACC.05^Full": report.acc05_full,
                })
        storage.write_json(out_dir / REPORT_JSON, {
            "split": args.split,
            "rows": {r: ROWS[r].model_dump() for r in rows},
            "results": results,
        })
        table = storage.format_table(results, COLUMNS)
        storage.write_text(out_dir / REPORT_TABLE, table)
    finally:
        finish(out_dir)
    print(table, end="")
    return 0


command = Command("ablate", "run the component ablation grid", configure, handle)
