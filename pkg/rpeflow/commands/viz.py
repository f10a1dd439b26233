"""
viz: PPM renderings of flows, events and scene-flow errors.
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from rpeflow import storage, viz
from rpeflow.commands.common import Command, print_json
from rpeflow.config import settings
from rpeflow.errors import DataError, UsageError
from rpeflow.metrics import record_samples
from rpeflow.training import load_dataset, read_predictions

VIZ_DIR = "viz"


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help=f"dataset directory (default: {settings.DATA_DIR})")
    parser.add_argument("--split", default="val")
    parser.add_argument("--sample", action="append", help="sample name (repeatable; default: whole split)")
    parser.add_argument("--pred", type=Path, help="predictions directory written by eval")
    parser.add_argument("--max-flow", type=float, help="flow magnitude rendered fully saturated")
    parser.add_argument("--out", help=f"output directory (default: {settings.RUNS_DIR})")


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    data_dir = Path(args.data or settings.DATA_DIR)
    out_dir = Path(args.out or settings.RUNS_DIR) / VIZ_DIR
    if not data_dir.exists():
        raise UsageError(f"dataset {data_dir} does not exist")
    if args.pred is not None and not args.pred.exists():
        raise UsageError(f"predictions directory {args.pred} does not exist")
    if args.max_flow is not None and args.max_flow <= 0:
        raise UsageError("--max-flow must be positive")

    names, samples = load_dataset(data_dir, args.split)
    by_name = dict(zip(names, samples))
    wanted = args.sample or names
    missing = [n for n in wanted if n not in by_name]
    if missing:
        raise UsageError(f"samples {missing} are not in split {args.split!r}")

    written = []
    for name in wanted:
        sample = by_name[name]
        if args.pred is not None:
            try:
                flow, sceneflow = read_predictions(args.pred, name, sample)
            except DataError as exc:
                raise UsageError(f"no usable predictions for {name}: {exc}")
        else:
            flow, sceneflow = sample.flow, sample.sceneflow
        # one saturation scale per sample so predicted and true flows are comparable
        max_flow = args.max_flow or float(np.linalg.norm(sample.flow, axis=-1).max()) or None
        target = out_dir / name
        images = {
            "frame0.ppm": viz.gray_to_rgb(sample.rgb0),
            "flow.ppm": viz.flow_to_rgb(flow, max_flow),
            "flow_gt.ppm": viz.flow_to_rgb(sample.flow, max_flow),
            "events.ppm": viz.event_image(sample.events),
            "sf_error.ppm": viz.sceneflow_error_image(
                sample.pc0, np.linalg.norm(sceneflow - sample.sceneflow, axis=-1), sample.cam
            ),
        }
        for fname, img in images.items():
            written.append(str(storage.write_ppm(target / fname, img)))
        logger.info("rendered sample", extra={"command": "viz", "sample": name, "path": str(target)})
    record_samples("viz", len(wanted))
    print_json({"path": str(out_dir), "images": len(written)})
    return 0


command = Command("viz", "render flow, event and error images", configure, handle)
